"""Confusion-matrix metrics and uncertainty-vs-error ranking statistics.

Per-class values whose denominator is zero are ``nan`` and are left out of
every mean; GA/MCA are micro-averaged over all evaluated pixels.
"""

from dataclasses import dataclass

import numpy as np


class ReportError(ValueError):
    """Reports that cannot be tabulated together."""


@dataclass
class ConfusionMatrix:
    """Pixel counts; rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise ReportError(f"cannot add confusion matrices of shapes {self.counts.shape} and {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred, truth, num_classes):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    for name, m in (("prediction", pred), ("truth", truth)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in [0, {num_classes}), found [{m.min()}, {m.max()}]")
    flat = truth.ravel().astype(np.int64) * num_classes + pred.ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class MetricReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    ga: float
    mca: float
    frequencies: np.ndarray

    @property
    def num_classes(self):
        return len(self.recall)

    def mean(self, name):
        values = getattr(self, name)
        return float(np.nanmean(values)) if np.any(~np.isnan(values)) else float("nan")


def metrics(cm):
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    total = counts.sum()
    if total <= 0:
        raise ValueError("metrics need a non-empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    recall = _ratio(tp, rows)
    defined = ~np.isnan(recall)
    return MetricReport(
        precision=_ratio(tp, cols),
        recall=recall,
        f1=_ratio(2 * tp, rows + cols),
        iou=_ratio(tp, rows + cols - tp),
        ga=float(tp.sum() / total),
        mca=float(recall[defined].mean()) if defined.any() else float("nan"),
        frequencies=rows / total,
    )


# ---------------------------------------------------------------------------
# uncertainty vs. error


def midranks(values):
    """1-based ranks with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(values)]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    return ranks


def uncertainty_error_auroc(uncertainty, errors):
    """Probability that a random error pixel is more uncertain than a random correct one.

    Mann-Whitney U with midranks; ``nan`` when either group is empty.
    """
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    e = np.asarray(errors, dtype=bool).ravel()
    if u.shape != e.shape:
        raise ValueError(f"uncertainty has {u.size} pixels, error mask has {e.size}")
    n_err = int(e.sum())
    n_ok = e.size - n_err
    if n_err == 0 or n_ok == 0:
        return float("nan")
    ranks = midranks(u)
    u_stat = ranks[e].sum() - n_err * (n_err + 1) / 2.0
    return float(u_stat / (n_err * n_ok))


def point_biserial(uncertainty, errors):
    """Pearson correlation between the score and the 0/1 error indicator."""
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.min() == e.max() or u.std() == 0:
        return float("nan")
    return float(np.corrcoef(u, e)[0, 1])


# ---------------------------------------------------------------------------
# tables

METRIC_ROWS = (("f1", "F1 score"), ("precision", "Precision"), ("recall", "Class accuracy"), ("iou", "IoU"))


def format_difference(a, b):
    """Signed ``b - a`` in percentage points, 2 decimals."""
    d = round(b - a, 2)
    if d == 0:
        d = 0.0
    return f"{d:+.2f}"


def _pct(x):
    return "nan" if np.isnan(x) else f"{100 * x:.2f}"


def report_rows(reports, labels, class_names=None, differences=()):
    """Rows ``[metric, class, value_1, ..., diff_1, ...]`` with percentages as strings."""
    if not reports:
        raise ReportError("report_table needs at least one report")
    if len(labels) != len(reports):
        raise ReportError(f"{len(labels)} labels for {len(reports)} reports")
    n = reports[0].num_classes
    for label, rep in zip(labels, reports):
        if rep.num_classes != n:
            raise ReportError(f"report {label!r} has {rep.num_classes} classes, expected {n}")
    names = list(class_names) if class_names is not None else [f"class {i}" for i in range(n)]
    if len(names) != n:
        raise ReportError(f"{len(names)} class names for {n} classes")

    def row(metric, cls, values):
        cells = [_pct(v) for v in values]
        diffs = []
        for a, b in differences:
            va, vb = values[a], values[b]
            diffs.append("nan" if np.isnan(va) or np.isnan(vb) else format_difference(100 * va, 100 * vb))
        return [metric, cls] + cells + diffs

    rows = []
    for attr, title in METRIC_ROWS:
        for i, cname in enumerate(names):
            rows.append(row(title, cname, [getattr(r, attr)[i] for r in reports]))
        rows.append(row(title, "Mean value", [r.mean(attr) for r in reports]))
    rows.append(row("GA", "all", [r.ga for r in reports]))
    rows.append(row("MCA", "all", [r.mca for r in reports]))
    return rows


def report_header(labels, differences=()):
    return ["metric", "class"] + list(labels) + [f"Difference ({labels[b]} - {labels[a]})" for a, b in differences]


def report_table(reports, labels, class_names=None, differences=()):
    """Aligned plain-text comparison table (percentages, optional Difference columns)."""
    header = report_header(labels, differences)
    rows = report_rows(reports, labels, class_names, differences)
    widths = [max(len(str(r[c])) for r in [header] + rows) for c in range(len(header))]
    lines = ["  ".join(str(cell).ljust(widths[c]) if c < 2 else str(cell).rjust(widths[c])
                       for c, cell in enumerate(r)) for r in [header] + rows]
    return "\n".join(lines) + "\n"


def report_csv(reports, labels, class_names=None, differences=()):
    header = report_header(labels, differences)
    rows = report_rows(reports, labels, class_names, differences)
    return "\n".join(",".join(str(c) for c in r) for r in [header] + rows) + "\n"
