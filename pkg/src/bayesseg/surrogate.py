"""Uncertainty-assisted surrogate: a second network fed the image plus the first network's outputs.

Channel layout of a surrogate input, per pixel::

    image (C) | predictive mean per class (N_b) | CSV per class (N_b) | entropy (1)

Uncertainty channels are min-max scaled with constants fitted on the training
split only.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .evaluation import evaluate, evaluate_maps, predict_all
from .io import write_btsr, write_mask
from .training import class_stats, fit
from .uncertainty import DEFAULT_SAMPLES, MAP


@dataclass
class Normalization:
    """Per-channel ``(min, max)`` for the ``2 * N_b + 1`` uncertainty channels."""

    minimum: np.ndarray
    maximum: np.ndarray

    def scale(self):
        span = self.maximum - self.minimum
        return np.where(span > 0, span, 1.0)

    def to_text(self, image_channels=0):
        lines = []
        for i, (lo, hi) in enumerate(zip(self.minimum, self.maximum)):
            lines.append(f"channel {image_channels + i}: min = {float(lo)!r} max = {float(hi)!r}")
        return "\n".join(lines) + "\n"


def uncertainty_channels(maps):
    return np.concatenate([maps.mean, maps.csv, maps.entropy[..., None]], axis=-1)


def fit_normalization(maps_list):
    stacked = [uncertainty_channels(m).reshape(-1, uncertainty_channels(m).shape[-1]) for m in maps_list]
    allpix = np.concatenate(stacked)
    return Normalization(allpix.min(axis=0), allpix.max(axis=0))


def build_input(image, maps, normalization=None):
    """Stack ``image`` with (normalized) mean, CSV and entropy channels."""
    image = np.asarray(image)
    if image.shape[:2] != maps.entropy.shape:
        raise T.DimensionError(f"image spatial shape {image.shape[:2]} differs from maps {maps.entropy.shape}")
    unc = uncertainty_channels(maps)
    if normalization is not None:
        if len(normalization.minimum) != unc.shape[-1]:
            raise T.DimensionError(
                f"normalization covers {len(normalization.minimum)} channels, maps have {unc.shape[-1]}")
        unc = (unc - normalization.minimum) / normalization.scale()
    return np.concatenate([image.astype(np.float64), unc], axis=-1).astype(np.float32)


def split_input(stacked, image_channels, num_classes, normalization=None):
    """Inverse of :func:`build_input`: ``(image, mean, csv, entropy)``."""
    stacked = np.asarray(stacked, dtype=np.float64)
    image = stacked[..., :image_channels]
    unc = stacked[..., image_channels:]
    if normalization is not None:
        unc = unc * normalization.scale() + normalization.minimum
    n = num_classes
    return image, unc[..., :n], unc[..., n:2 * n], unc[..., 2 * n]


def surrogate_spec(base_spec):
    return base_spec.replace(input_channels=base_spec.input_channels + 2 * base_spec.num_classes + 1)


@dataclass
class SurrogateResult:
    params: object
    spec: object
    normalization: Normalization
    inputs: list
    base_eval: object
    surrogate_eval: object
    train_result: object

    @property
    def iou_difference(self):
        return self.surrogate_eval.report.mean("iou") - self.base_eval.report.mean("iou")


def run_surrogate_pipeline(base_params, base_spec, images, masks, split, config,
                           n_samples=DEFAULT_SAMPLES, seed=0, rule=MAP, rule_for=None):
    """Build surrogate inputs with the frozen base model, train the surrogate, compare on the test split.

    ``rule_for(stats)``, if given, builds the surrogate's decision rule from its
    own training statistics (needed for ML); otherwise ``rule`` is used for both.
    """
    everything = list(range(len(images)))
    preds, maps = predict_all(base_params, base_spec, images, everything, n_samples, seed, rule)
    norm = fit_normalization([maps[i] for i in split.train])
    inputs = [build_input(img, mp, norm) for img, mp in zip(images, maps)]

    spec = surrogate_spec(base_spec)
    stats = class_stats([masks[i] for i in split.train], spec.num_classes, config.weight_scheme)
    trained = fit(spec, config,
                  [inputs[i] for i in split.train], [masks[i] for i in split.train],
                  [inputs[i] for i in split.val], [masks[i] for i in split.val], stats)
    test_masks = [masks[i] for i in split.test]
    base_eval = evaluate_maps([preds[i] for i in split.test], [maps[i] for i in split.test],
                              test_masks, spec.num_classes)
    sur_rule = rule_for(stats) if rule_for is not None else rule
    sur_eval = evaluate(trained.params, spec, inputs, masks, split.test, n_samples, seed, sur_rule)
    return SurrogateResult(trained.params, spec, norm, inputs, base_eval, sur_eval, trained)


def write_surrogate_dataset(out_dir, inputs, masks, normalization, image_channels):
    """``inputs/NNNN.btsr``, ``masks/NNNN.pgm`` and ``normalization.txt``."""
    os.makedirs(os.path.join(out_dir, "inputs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for i, (x, m) in enumerate(zip(inputs, masks)):
        write_btsr(x, os.path.join(out_dir, "inputs", f"{i:04d}.btsr"))
        write_mask(m, os.path.join(out_dir, "masks", f"{i:04d}.pgm"))
    with open(os.path.join(out_dir, "normalization.txt"), "w") as fh:
        fh.write(f"image_channels = {image_channels}\n")
        fh.write(normalization.to_text(image_channels))
