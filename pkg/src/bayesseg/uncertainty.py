"""Monte Carlo dropout sampling, predictive mean, entropy, class softmax variance, decision rules."""

from dataclasses import dataclass

import numpy as np

from .densenet import DETERMINISTIC, ForwardMode, forward

DEFAULT_SAMPLES = 50
# samples evaluated per batched forward pass
MC_CHUNK = 10


class RuleError(ValueError):
    """A decision rule cannot be applied (e.g. ML with a zero class frequency)."""


class UndefinedVarianceError(ValueError):
    """Sample variance needs at least two samples."""


@dataclass
class McStack:
    """Softmax samples of shape ``(H, W, N_b, N_s)``."""

    samples: np.ndarray
    source: str = "bayesian"

    def __post_init__(self):
        if self.samples.ndim != 4:
            raise ValueError(f"McStack needs (H, W, N_b, N_s) samples, got shape {self.samples.shape}")
        if self.source not in ("bayesian", "benchmark"):
            raise ValueError(f"source must be bayesian or benchmark, got {self.source!r}")
        if self.source == "benchmark" and self.n_samples != 1:
            raise ValueError(f"a benchmark stack holds exactly one sample, got {self.n_samples}")

    @property
    def n_samples(self):
        return self.samples.shape[-1]


@dataclass
class UncertaintyMaps:
    mean: np.ndarray
    csv: np.ndarray
    entropy: np.ndarray
    mcsv: np.ndarray


@dataclass(frozen=True)
class DecisionRule:
    kind: str = "MAP"
    frequencies: tuple = None

    def __post_init__(self):
        if self.kind not in ("MAP", "ML"):
            raise RuleError(f"decision rule must be MAP or ML, got {self.kind!r}")
        if self.kind == "ML":
            if self.frequencies is None:
                raise RuleError("the ML rule needs training class frequencies")
            object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))


MAP = DecisionRule("MAP")


def mc_sample(params, spec, image, n_samples=DEFAULT_SAMPLES, seed=0, chunk=MC_CHUNK):
    """Stack ``n_samples`` dropout-active softmax maps for one ``(H, W, C)`` image.

    Sample ``n`` draws its masks from keys ``(seed, site, n)``, so the stack does
    not depend on ``chunk`` or evaluation order.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}")
    image = np.asarray(image)
    out = np.empty(image.shape[:2] + (spec.num_classes, n_samples), dtype=np.float64)
    for start in range(0, n_samples, chunk):
        ids = list(range(start, min(start + chunk, n_samples)))
        batch = np.broadcast_to(image, (len(ids),) + image.shape)
        probs = forward(params, spec, batch, ForwardMode.mc(seed, ids)).data
        out[..., start:start + len(ids)] = np.moveaxis(probs, 0, -1)
    return McStack(out, "bayesian")


def benchmark_sample(params, spec, image):
    probs = forward(params, spec, np.asarray(image), DETERMINISTIC).data
    return McStack(probs.astype(np.float64)[..., None], "benchmark")


def predictive_mean(stack):
    samples = stack.samples if isinstance(stack, McStack) else np.asarray(stack)
    return samples.mean(axis=-1)


def entropy(p):
    """Per-pixel ``sum(-p_i ln p_i)`` over the last axis, with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    positive = p > 0
    terms = np.where(positive, p * np.log(np.where(positive, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def class_softmax_variance(stack):
    """Unbiased per-class sample variance over the MC axis."""
    samples = stack.samples if isinstance(stack, McStack) else np.asarray(stack)
    n = samples.shape[-1]
    if n < 2:
        raise UndefinedVarianceError(f"class softmax variance needs at least 2 samples, got {n}")
    return samples.var(axis=-1, ddof=1)


def mcsv(csv):
    """Mean over classes of the per-class softmax variances."""
    return np.asarray(csv).mean(axis=-1)


def decide(p, rule=MAP):
    """Label map from class scores ``p``; ties go to the lowest class index."""
    p = np.asarray(p)
    if rule.kind == "MAP":
        return p.argmax(axis=-1)
    freqs = np.asarray(rule.frequencies, dtype=np.float64)
    if freqs.shape != (p.shape[-1],):
        raise RuleError(f"ML rule has {freqs.size} frequencies for {p.shape[-1]} classes")
    if np.any(freqs <= 0):
        zero = [int(i) for i in np.flatnonzero(freqs <= 0)]
        raise RuleError(f"ML rule needs positive frequencies; classes {zero} have none")
    return (p / freqs).argmax(axis=-1)


def uncertainty_maps(stack):
    mean = predictive_mean(stack)
    if stack.n_samples == 1:
        csv = np.zeros_like(mean)
    else:
        csv = class_softmax_variance(stack)
    return UncertaintyMaps(mean=mean, csv=csv, entropy=entropy(mean), mcsv=mcsv(csv))


def sample(params, spec, image, n_samples=DEFAULT_SAMPLES, seed=0):
    """MC stack for a Bayesian network, single deterministic sample for a benchmark."""
    if spec.dropout_p == 0:
        return benchmark_sample(params, spec, image)
    return mc_sample(params, spec, image, n_samples, seed)


def analyze(params, spec, image, n_samples=DEFAULT_SAMPLES, seed=0, rule=MAP, keep_stack=False):
    """Prediction mask and uncertainty maps for one image.

    Returns ``(mask, maps)`` or ``(mask, maps, stack)`` with ``keep_stack``.
    """
    stack = sample(params, spec, image, n_samples, seed)
    maps = uncertainty_maps(stack)
    mask = decide(maps.mean, rule)
    if keep_stack:
        return mask, maps, stack
    return mask, maps
