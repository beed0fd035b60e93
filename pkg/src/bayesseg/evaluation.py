"""Run a trained network over a dataset split and collect metrics and uncertainty statistics."""

from dataclasses import dataclass

import numpy as np

from .metrics import ConfusionMatrix, confusion, metrics, point_biserial, uncertainty_error_auroc
from .uncertainty import DEFAULT_SAMPLES, MAP, analyze


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    report: object
    entropy_auroc: float
    mcsv_auroc: float
    entropy_pbc: float
    mcsv_pbc: float
    mean_entropy: float
    mean_mcsv: float
    predictions: list
    maps: list

    def summary_lines(self, split_name="test"):
        r = self.report
        return [
            f"split = {split_name}",
            f"pixels = {self.confusion.total}",
            f"GA = {r.ga:.6f}",
            f"MCA = {r.mca:.6f}",
            f"mean_F1 = {r.mean('f1'):.6f}",
            f"mean_IoU = {r.mean('iou'):.6f}",
            f"entropy_auroc = {self.entropy_auroc:.6f}",
            f"mcsv_auroc = {self.mcsv_auroc:.6f}",
            f"entropy_point_biserial = {self.entropy_pbc:.6f}",
            f"mcsv_point_biserial = {self.mcsv_pbc:.6f}",
            f"mean_entropy = {self.mean_entropy:.6e}",
            f"mean_mcsv = {self.mean_mcsv:.6e}",
        ]


def evaluate_maps(predictions, maps, masks, num_classes):
    """Metrics from precomputed predictions/maps (no network calls)."""
    cm = ConfusionMatrix.zeros(num_classes)
    for pred, mask in zip(predictions, masks):
        cm = cm + confusion(pred, mask, num_classes)
    errors = np.concatenate([(p != m).ravel() for p, m in zip(predictions, masks)])
    ent = np.concatenate([mp.entropy.ravel() for mp in maps])
    var = np.concatenate([mp.mcsv.ravel() for mp in maps])
    return Evaluation(
        confusion=cm,
        report=metrics(cm),
        entropy_auroc=uncertainty_error_auroc(ent, errors),
        mcsv_auroc=uncertainty_error_auroc(var, errors),
        entropy_pbc=point_biserial(ent, errors),
        mcsv_pbc=point_biserial(var, errors),
        mean_entropy=float(ent.mean()),
        mean_mcsv=float(var.mean()),
        predictions=list(predictions),
        maps=list(maps),
    )


def predict_all(params, spec, images, indices, n_samples=DEFAULT_SAMPLES, seed=0, rule=MAP):
    """Predictions and maps for ``images[i]`` with per-image seed ``seed + i``."""
    preds, maps = [], []
    for i in indices:
        pred, mp = analyze(params, spec, images[i], n_samples, seed + i, rule)
        preds.append(pred)
        maps.append(mp)
    return preds, maps


def evaluate(params, spec, images, masks, indices, n_samples=DEFAULT_SAMPLES, seed=0, rule=MAP):
    preds, maps = predict_all(params, spec, images, indices, n_samples, seed, rule)
    return evaluate_maps(preds, maps, [masks[i] for i in indices], spec.num_classes)
