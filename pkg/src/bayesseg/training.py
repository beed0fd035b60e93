"""Weighted cross-entropy training: splits, class statistics, Nadam, early stopping."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .densenet import DETERMINISTIC, ForwardMode, build, forward
from .rng import keyed_generator

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-8
WEIGHT_SCHEMES = ("UW", "MFW")
# rng streams reserved for data-order shuffling (distinct from dropout sites)
_SPLIT_STREAM = (1 << 40) + 1
_EPOCH_STREAM = (1 << 40) + 2


class LabelError(ValueError):
    """A mask holds a label outside ``[0, num_classes)``."""


class SizeError(ValueError):
    """A dataset or split is too small for the requested operation."""


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    train: list
    val: list
    test: list

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def validation_size(n):
    return _round_half_up(0.2 * n)


def split(n, seed=0):
    """Shuffle ``range(n)`` and cut 20% test, then 20% of the rest for validation."""
    if n < 5:
        raise SizeError(f"split needs at least 5 observations, got {n}")
    order = list(range(n))
    rng = keyed_generator(seed, _SPLIT_STREAM)
    for i in range(n - 1, 0, -1):  # Fisher-Yates
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    n_test = _round_half_up(0.2 * n)
    n_val = validation_size(n - n_test)
    test = sorted(order[:n_test])
    val = sorted(order[n_test:n_test + n_val])
    train = sorted(order[n_test + n_val:])
    return SplitSpec(train, val, test)


# ---------------------------------------------------------------------------
# class statistics


@dataclass
class ClassStats:
    pixel_counts: np.ndarray
    frequencies: np.ndarray
    weights: np.ndarray
    scheme: str = "UW"

    def to_text(self):
        return (f"scheme = {self.scheme}\n"
                f"pixel_counts = {','.join(str(int(c)) for c in self.pixel_counts)}\n"
                f"frequencies = {','.join(repr(float(f)) for f in self.frequencies)}\n"
                f"weights = {','.join(repr(float(w)) for w in self.weights)}\n")

    @classmethod
    def from_text(cls, text):
        raw = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        raw = {k.strip(): v.strip() for k, v in raw.items()}
        return cls(
            pixel_counts=np.array([int(v) for v in raw["pixel_counts"].split(",")], dtype=np.int64),
            frequencies=np.array([float(v) for v in raw["frequencies"].split(",")]),
            weights=np.array([float(v) for v in raw["weights"].split(",")]),
            scheme=raw.get("scheme", "UW"),
        )


def check_labels(mask, num_classes):
    bad = np.argwhere((mask < 0) | (mask >= num_classes))
    if len(bad):
        loc = tuple(int(v) for v in bad[0])
        raise LabelError(f"label {int(mask[loc])} at pixel {loc} is outside [0, {num_classes})")


def class_stats(masks, num_classes, scheme="UW"):
    """Pixel counts, frequencies and loss weights over the given masks.

    MFW weights are ``median(f) / f_i``; classes that never occur get
    frequency 0 and weight 0.
    """
    if scheme not in WEIGHT_SCHEMES:
        raise ValueError(f"weight scheme must be one of {WEIGHT_SCHEMES}, got {scheme!r}")
    counts = np.zeros(num_classes, dtype=np.int64)
    for i, mask in enumerate(masks):
        mask = np.asarray(mask)
        try:
            check_labels(mask, num_classes)
        except LabelError as exc:
            raise LabelError(f"mask {i}: {exc}") from None
        counts += np.bincount(mask.ravel(), minlength=num_classes)
    total = counts.sum()
    if total == 0:
        raise SizeError("class_stats needs at least one labelled pixel")
    freqs = counts / total
    if scheme == "UW":
        weights = np.ones(num_classes)
    else:
        median = np.median(freqs)
        weights = np.zeros(num_classes)
        present = freqs > 0
        weights[present] = median / freqs[present]
    return ClassStats(counts, freqs, weights, scheme)


# ---------------------------------------------------------------------------
# loss


def weighted_cross_entropy(probs, mask, weights):
    """``-sum(w_y log max(S_y, eps)) / sum(w_y)`` over all pixels.

    ``probs`` is a softmax Tensor ``(..., H, W, N_b)``; ``mask`` integer labels
    of the matching leading shape; ``weights`` an array or :class:`ClassStats`.
    """
    if isinstance(weights, ClassStats):
        weights = weights.weights
    mask = np.asarray(mask)
    if mask.shape != probs.shape[:-1]:
        raise T.DimensionError(f"mask shape {mask.shape} does not match probability map {probs.shape[:-1]}")
    w = np.asarray(weights, dtype=np.float64)[mask]
    wsum = w.sum()
    if wsum <= 0:
        raise SizeError("every pixel has zero loss weight")
    p_true = np.take_along_axis(probs.data, mask[..., None], axis=-1)[..., 0]
    clamped = np.maximum(p_true, LOSS_EPS)
    loss = -(w * np.log(clamped.astype(np.float64))).sum() / wsum

    def back(g):
        grad = np.zeros_like(probs.data)
        active = p_true > LOSS_EPS
        local = np.where(active, -w / (wsum * np.where(active, p_true, 1.0)), 0.0)
        np.put_along_axis(grad, mask[..., None], (g * local)[..., None].astype(grad.dtype), axis=-1)
        return (grad,)

    return T._node(np.asarray(loss, dtype=probs.dtype), (probs,), back, "weighted_ce")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class NadamState:
    m: list
    v: list
    t: int = 0


def nadam_init(params):
    return NadamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def nadam_step(params, grads, state, lr, l2_coeff=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Nadam update.

    ``theta -= lr * (beta1 * m_hat + (1 - beta1) * g / (1 - beta1^t)) / (sqrt(v_hat) + eps)``
    with the L2 term ``l2_coeff * theta`` added to ``g`` first.
    """
    state.t += 1
    t = state.t
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g + l2_coeff * p.data if l2_coeff else g
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_bar = beta1 * state.m[i] / c1 + (1 - beta1) * g / c1
        v_hat = state.v[i] / c2
        p.data -= (lr * m_bar / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return state


def learning_rate(lr0, decay, epoch):
    """Learning rate for the 0-based ``epoch``."""
    return lr0 * decay ** epoch


# ---------------------------------------------------------------------------
# fitting


@dataclass
class TrainConfig:
    lr0: float = 1.0e-4
    lr_decay_per_epoch: float = 0.9996
    batch_size: int = 2
    max_epochs: int = 200
    patience: int = 15
    l2_coeff: float = 1e-4
    weight_scheme: str = "UW"
    seed: int = 0
    val_samples: int = 10
    val_mode: str = "auto"
    bn_recalibrate: bool = False


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    is_best: bool

    def line(self):
        return f"{self.epoch},{self.lr:.6e},{self.train_loss:.6f},{self.val_loss:.6f},{int(self.is_best)}"


@dataclass
class TrainResult:
    params: object
    log: list = field(default_factory=list)
    best_epoch: int = 0

    def log_text(self):
        return "epoch,lr,train_loss,val_loss,is_best\n" + "".join(r.line() + "\n" for r in self.log)


def early_stopping_trace(val_losses, patience, max_epochs=None):
    """Replay the stopping rule on a loss sequence: ``(epochs_run, best_epoch)`` (1-based)."""
    best, best_epoch, waited = np.inf, 0, 0
    limit = len(val_losses) if max_epochs is None else min(max_epochs, len(val_losses))
    for e in range(limit):
        if val_losses[e] < best:
            best, best_epoch, waited = val_losses[e], e + 1, 0
        else:
            waited += 1
            if waited >= patience:
                return e + 1, best_epoch
    return limit, best_epoch


def _batches(arr_images, n, batch_size):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


# dropout steps used while re-estimating BN statistics, far above any training step
_RECAL_STEP = 1 << 40


def recalibrate_bn(params, spec, images, batch_size, seed, epoch=0):
    """Replace BN running statistics by their average over ``images``.

    Runs train-mode forwards (batch statistics, keyed dropout) without any
    parameter update and folds each batch in with weight ``1/(b+1)``, so the
    result is the plain mean of the per-batch statistics under the current
    weights rather than a lagging moving average.
    """
    states = list(params.bn_states.values())
    saved = [st.momentum for st in states]
    n = len(images)
    n_batches = -(-n // batch_size)
    try:
        for b, (start, stop) in enumerate(_batches(images, n, batch_size)):
            for st in states:
                st.momentum = b / (b + 1)
            forward(params, spec, images[start:stop], ForwardMode.train(seed, _RECAL_STEP + epoch * n_batches + b))
    finally:
        for st, m in zip(states, saved):
            st.momentum = m


def validation_loss(params, spec, images, masks, weights, mode, n_samples, seed):
    """Mean weighted CE over validation images, MC-averaged when ``mode == "mc"``."""
    losses = []
    for idx, (img, mask) in enumerate(zip(images, masks)):
        if mode == "mc":
            from .uncertainty import mc_sample, predictive_mean

            probs = predictive_mean(mc_sample(params, spec, img, n_samples, seed + idx))
        else:
            probs = forward(params, spec, img, DETERMINISTIC).data
        loss = weighted_cross_entropy(T.Tensor(probs), mask, weights)
        losses.append(float(loss.data))
    return float(np.mean(losses))


def fit(spec, config, train_images, train_masks, val_images, val_masks, stats=None, init_params=None,
        callback=None):
    """Train from scratch (or ``init_params``), keep the lowest-validation-loss checkpoint."""
    if not len(train_images) or not len(val_images):
        raise SizeError(f"fit needs non-empty splits, got {len(train_images)} train / {len(val_images)} val")
    if stats is None:
        stats = class_stats(train_masks, spec.num_classes, config.weight_scheme)
    weights = stats.weights
    val_mode = config.val_mode
    if val_mode == "auto":
        val_mode = "mc" if spec.dropout_p > 0 else "deterministic"
    if val_mode not in ("mc", "deterministic"):
        raise ValueError(f"val_mode must be auto, mc or deterministic, got {config.val_mode!r}")

    params = init_params.copy() if init_params is not None else build(spec, config.seed)
    trainable = params.trainable()
    opt = nadam_init(trainable)
    images = np.stack(train_images).astype(T.get_dtype())
    masks = np.stack(train_masks)
    n = len(images)
    result = TrainResult(params.copy())
    best = np.inf
    waited = 0
    step = 0
    for epoch in range(config.max_epochs):
        lr = learning_rate(config.lr0, config.lr_decay_per_epoch, epoch)
        order = keyed_generator(config.seed, _EPOCH_STREAM, epoch).permutation(n)
        running = []
        for start, stop in _batches(images, n, config.batch_size):
            idx = order[start:stop]
            for t in trainable:
                t.grad = None
            probs = forward(params, spec, images[idx], ForwardMode.train(config.seed, step))
            loss = weighted_cross_entropy(probs, masks[idx], weights)
            grads = T.backward(loss, wrt=trainable)
            nadam_step(trainable, grads, opt, lr, config.l2_coeff)
            running.append(float(loss.data))
            step += 1
        train_loss = float(np.mean(running))
        if config.bn_recalibrate:
            recalibrate_bn(params, spec, images, config.batch_size, config.seed, epoch)
        val_loss = validation_loss(params, spec, val_images, val_masks, weights, val_mode,
                                   config.val_samples, config.seed)
        improved = val_loss < best
        if improved:
            best, waited = val_loss, 0
            result.params = params.copy()
            result.best_epoch = epoch + 1
        else:
            waited += 1
        record = EpochRecord(epoch + 1, lr, train_loss, val_loss, improved)
        result.log.append(record)
        logger.info(record.line())
        if callback is not None:
            callback(record)
        if waited >= config.patience:
            break
    for t in trainable:
        t.grad = None
    return result
