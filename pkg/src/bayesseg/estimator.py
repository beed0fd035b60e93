"""scikit-learn style wrappers around training, MC inference and the surrogate stacker.

``X`` is a list (or ``(N, H, W, C)`` array) of float images in [0, 1] and ``y``
the matching ``(H, W)`` integer masks.  Images whose sides are not multiples of
``2 ** pools`` are edge-padded for the network and the outputs cropped back.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import densenet as D
from .metrics import ConfusionMatrix, confusion, metrics
from .surrogate import build_input, fit_normalization
from .training import TrainConfig, class_stats, fit as train_network
from .uncertainty import DEFAULT_SAMPLES, MAP, DecisionRule, decide, sample, uncertainty_maps


def check_images(X, channels=None):
    """Return a list of float ``(H, W, C)`` arrays, validating rank and channel count."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    images = [np.asarray(x, dtype=np.float32) for x in X]
    if not images:
        raise ValueError("expected at least one image, got 0")
    for i, img in enumerate(images):
        if img.ndim != 3:
            raise ValueError(f"image {i}: expected (H, W, C), got shape {img.shape}")
        if channels is not None and img.shape[-1] != channels:
            raise ValueError(f"image {i}: expected {channels} channels, got {img.shape[-1]}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"image {i}: contains non-finite values")
    return images


def check_masks(y, images, num_classes=None):
    """Return integer masks matching ``images`` spatially."""
    masks = [np.asarray(m) for m in y]
    if len(masks) != len(images):
        raise ValueError(f"{len(images)} images but {len(masks)} masks")
    out = []
    for i, (m, img) in enumerate(zip(masks, images)):
        if m.shape != img.shape[:2]:
            raise ValueError(f"mask {i}: shape {m.shape} does not match image {img.shape[:2]}")
        if not np.issubdtype(m.dtype, np.integer):
            if not np.all(m == np.round(m)):
                raise ValueError(f"mask {i}: labels must be integers")
        m = m.astype(np.int64)
        if m.min() < 0 or (num_classes is not None and m.max() >= num_classes):
            raise ValueError(f"mask {i}: labels must lie in [0, {num_classes}), found [{m.min()}, {m.max()}]")
        out.append(m)
    return out


class BayesianSegmenter(ClassifierMixin, BaseEstimator):
    """FC-DenseNet segmenter with MC-dropout uncertainty.

    Parameters mirror ``NetworkSpec`` and ``TrainConfig``; ``dropout_p=0`` gives
    the deterministic benchmark model.  ``decision`` is ``"MAP"`` or ``"ML"``.
    ``bn_recalibrate`` re-estimates batch-norm statistics over the training set
    after every epoch (useful when an epoch holds only a few dozen updates).
    """

    def __init__(self, profile="tiny", num_classes=None, dropout_p=0.5, weight_scheme="UW", decision="MAP",
                 lr0=1e-3, lr_decay_per_epoch=0.9996, batch_size=2, max_epochs=200, patience=15,
                 l2_coeff=1e-4, val_samples=10, n_samples=DEFAULT_SAMPLES, bn_recalibrate=False, random_state=0):
        self.profile = profile
        self.num_classes = num_classes
        self.dropout_p = dropout_p
        self.weight_scheme = weight_scheme
        self.decision = decision
        self.lr0 = lr0
        self.lr_decay_per_epoch = lr_decay_per_epoch
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.l2_coeff = l2_coeff
        self.val_samples = val_samples
        self.n_samples = n_samples
        self.bn_recalibrate = bn_recalibrate
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(lr0=self.lr0, lr_decay_per_epoch=self.lr_decay_per_epoch, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, l2_coeff=self.l2_coeff,
                           weight_scheme=self.weight_scheme, seed=self.random_state,
                           val_samples=self.val_samples, bn_recalibrate=self.bn_recalibrate)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train; without an explicit validation set the last fifth of ``X`` is held out."""
        if self.decision not in ("MAP", "ML"):
            raise ValueError(f"decision must be MAP or ML, got {self.decision!r}")
        images = check_images(X)
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = max(2, int(max(np.max(m) for m in y)) + 1)
        masks = check_masks(y, images, num_classes)
        if X_val is None:
            if len(images) < 2:
                raise ValueError("need at least 2 images when no validation set is given")
            n_val = max(1, len(images) // 5)
            images, val_images = images[:-n_val], images[-n_val:]
            masks, val_masks = masks[:-n_val], masks[-n_val:]
        else:
            val_images = check_images(X_val, images[0].shape[-1])
            val_masks = check_masks(y_val, val_images, num_classes)
        spec = D.PROFILES[self.profile].replace(num_classes=num_classes, input_channels=images[0].shape[-1],
                                                dropout_p=self.dropout_p)
        self.multiple_ = 2 ** spec.n_pools
        pad = lambda seq: [D.pad_to_multiple(a, self.multiple_) for a in seq]
        stats = class_stats(masks, num_classes, self.weight_scheme)
        result = train_network(spec, self._train_config(), pad(images), self._pad_masks(masks),
                               pad(val_images), self._pad_masks(val_masks), stats)
        self.spec_ = spec
        self.params_ = result.params
        self.stats_ = stats
        self.train_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(num_classes)
        self.n_features_in_ = spec.input_channels
        return self

    def _pad_masks(self, masks):
        return [D.pad_to_multiple(m[..., None], self.multiple_)[..., 0] for m in masks]

    @property
    def rule_(self):
        check_is_fitted(self, "params_")
        if self.decision == "ML":
            return DecisionRule("ML", tuple(self.stats_.frequencies))
        return MAP

    def _maps(self, X, seed_offset=0):
        check_is_fitted(self, "params_")
        images = check_images(X, self.n_features_in_)
        out = []
        for i, img in enumerate(images):
            h, w = img.shape[:2]
            stack = sample(self.params_, self.spec_, D.pad_to_multiple(img, self.multiple_), self.n_samples,
                           self.random_state + seed_offset + i)
            maps = uncertainty_maps(stack)
            out.append(type(maps)(maps.mean[:h, :w], maps.csv[:h, :w], maps.entropy[:h, :w], maps.mcsv[:h, :w]))
        return out

    def predict_uncertainty(self, X):
        """List of ``UncertaintyMaps`` (mean, CSV, entropy, MCSV) per image."""
        return self._maps(X)

    def predict_proba(self, X):
        """Predictive mean ``(N, H, W, N_b)`` (all images must share a size)."""
        return np.stack([m.mean for m in self._maps(X)])

    def predict(self, X):
        rule = self.rule_
        return np.stack([decide(m.mean, rule) for m in self._maps(X)])

    def score(self, X, y, sample_weight=None):
        """Mean IoU over classes present in truth or prediction."""
        preds = self.predict(X)
        masks = check_masks(y, check_images(X), self.spec_.num_classes)
        cm = ConfusionMatrix.zeros(self.spec_.num_classes)
        for p, m in zip(preds, masks):
            cm = cm + confusion(p, m, self.spec_.num_classes)
        return metrics(cm).mean("iou")


class UncertaintyStacker(TransformerMixin, BaseEstimator):
    """Append a fitted segmenter's mean, CSV and entropy channels to each image.

    ``fit`` learns the per-channel min-max constants on the given images only.
    """

    def __init__(self, segmenter=None, normalize=True):
        self.segmenter = segmenter
        self.normalize = normalize

    def _maps(self, X):
        if self.segmenter is None:
            raise ValueError("UncertaintyStacker needs a fitted segmenter")
        try:
            check_is_fitted(self.segmenter, "params_")
        except NotFittedError:
            raise NotFittedError("the wrapped segmenter must be fitted before the stacker") from None
        return self.segmenter.predict_uncertainty(X)

    def fit(self, X, y=None):
        maps = self._maps(X)
        self.normalization_ = fit_normalization(maps) if self.normalize else None
        self.n_features_in_ = self.segmenter.n_features_in_
        self.n_features_out_ = self.n_features_in_ + 2 * self.segmenter.spec_.num_classes + 1
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        images = check_images(X, self.n_features_in_)
        maps = self._maps(images)
        return [build_input(img, mp, self.normalization_) for img, mp in zip(images, maps)]

