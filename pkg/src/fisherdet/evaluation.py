"""ROC curves, AUC and histograms for clean-vs-adversarial score populations.

Adversarial is the positive class and a sample is flagged when its score is
strictly greater than the threshold. Thresholds sweep +inf, every distinct
score (descending) and -inf, so tied clean/adversarial scores move the curve
diagonally and the trapezoidal area equals the Mann-Whitney statistic with
ties counted one half. The area is accumulated in integer counts, so the
two agree exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataError, NumericError


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    fp: np.ndarray  # false-positive counts behind fpr
    tp: np.ndarray  # true-positive counts behind tpr
    n_clean: int
    n_adv: int
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _population(scores, name) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyDataError(f"{name} score population is empty")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} scores contain non-finite values")
    return arr


def roc(clean_scores, adv_scores) -> RocCurve:
    clean = _population(clean_scores, "clean")
    adv = _population(adv_scores, "adversarial")
    distinct = np.unique(np.concatenate([clean, adv]))[::-1]
    thresholds = np.concatenate([[np.inf], distinct, [-np.inf]])
    # number of scores strictly above each threshold
    clean_sorted, adv_sorted = np.sort(clean), np.sort(adv)
    fp = clean.size - np.searchsorted(clean_sorted, thresholds, side="right")
    tp = adv.size - np.searchsorted(adv_sorted, thresholds, side="right")
    curve = RocCurve(fpr=fp / clean.size, tpr=tp / adv.size, thresholds=thresholds,
                     fp=fp, tp=tp, n_clean=clean.size, n_adv=adv.size, auc=0.0)
    curve.auc = auc(curve)
    return curve


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    if curve.fp is not None and curve.tp is not None:
        twice_area = int(np.sum(np.diff(curve.fp) * (curve.tp[1:] + curve.tp[:-1])))
        return twice_area / (2 * curve.n_clean * curve.n_adv)
    return trapezoid(curve.fpr, curve.tpr)


def trapezoid(fpr, tpr) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def curve_from_points(points) -> RocCurve:
    """Curve from explicit (fpr, tpr) points, without score counts."""
    pts = np.asarray(points, dtype=np.float64)
    c = RocCurve(fpr=pts[:, 0], tpr=pts[:, 1], thresholds=np.full(len(pts), np.nan),
                 fp=None, tp=None, n_clean=0, n_adv=0, auc=0.0)
    c.auc = auc(c)
    return c


def histogram(scores, bins: int = 30, range: tuple | None = None):
    """Uniform-bin histogram; the last bin is closed on the right."""
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyDataError("histogram of an empty population")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, edges = np.histogram(arr, bins=bins, range=range)
    return edges, counts


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def write_histogram_csv(edges, counts, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for left, right, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(left)), repr(float(right)), int(c)])


def write_gnuplot(curve: RocCurve, path) -> None:
    """Whitespace-separated ``fpr tpr`` data file."""
    with open(path, "w") as fh:
        fh.write(f"# fpr tpr   (AUC = {curve.auc:.6f})\n")
        for f, p in zip(curve.fpr, curve.tpr):
            fh.write(f"{f:.10g} {p:.10g}\n")
