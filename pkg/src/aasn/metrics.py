"""Image-level classification metrics and the area-based FROC used for localization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, MetricError
from .losses import min_distance

log = logging.getLogger(__name__)


def image_score(y) -> float:
    """Image-level score: the maximum of the heatmap."""
    arr = np.asarray(getattr(y, "data", y))
    if arr.size == 0:
        raise ContractError("image_score of an empty heatmap")
    return float(arr.max())


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0/1")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + P(pos == neg) / 2."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative samples")
    ranks = rankdata(s)  # average ranks give ties half credit
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP over a descending sweep where tied scores enter together."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    recall = tp / n_pos
    precision = tp / seen
    d_recall = np.diff(np.r_[0.0, recall])
    return float((d_recall * precision).sum())


@dataclass
class EvalRecord:
    """One image's heatmap plus ground truth, on the heatmap's own grid."""

    heatmap: np.ndarray  # (h, w) at ``stride``
    points: np.ndarray  # (k, 2) annotation points in full-resolution ROI pixels
    stride: int
    ambiguity_radius: float  # in full-resolution pixels
    negative: np.ndarray = field(init=False)
    cells: np.ndarray = field(init=False)  # (k,) flat index of each point's heatmap cell

    def __post_init__(self):
        self.heatmap = np.asarray(self.heatmap, dtype=np.float64)
        if self.heatmap.ndim != 2:
            self.heatmap = self.heatmap.reshape(self.heatmap.shape[-2:])
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.heatmap.shape
        full = (h * self.stride, w * self.stride)
        d = min_distance(self.points, full, self.stride)
        self.negative = d > self.ambiguity_radius
        # nearest heatmap cell to each point
        off = (self.stride - 1) / 2.0
        cx = np.clip(np.rint((self.points[:, 0] - off) / self.stride), 0, w - 1).astype(int)
        cy = np.clip(np.rint((self.points[:, 1] - off) / self.stride), 0, h - 1).astype(int)
        self.cells = cy * w + cx

    @property
    def label(self) -> int:
        return int(len(self.points) > 0)

    def point_values(self) -> np.ndarray:
        return self.heatmap.ravel()[self.cells]


@dataclass
class FrocCurve:
    thresholds: np.ndarray  # descending
    recall: np.ndarray
    fp_ratio: np.ndarray
    n_points: int
    n_images_fp: int
    n_excluded: int = 0

    def rows(self):
        return zip(self.thresholds.tolist(), self.recall.tolist(), self.fp_ratio.tolist())


def default_thresholds(records, n_quantiles: int = 2001) -> np.ndarray:
    """Every point-cell value (where recall changes) plus quantiles of the negative-cell values."""
    pv = [r.point_values() for r in records]
    neg = [r.heatmap[r.negative] for r in records]
    vals = [np.concatenate(pv)] if pv else []
    negv = np.concatenate(neg) if neg else np.zeros(0)
    if negv.size:
        vals.append(np.quantile(negv, np.linspace(0.0, 1.0, n_quantiles)))
    vals.append(np.array([0.0, 1.0]))
    return np.unique(np.concatenate(vals))[::-1]


def modified_froc(records, thresholds=None) -> FrocCurve:
    """Fracture recall against mean false-positive area ratio per image.

    A point is recalled at threshold t when its heatmap cell is >= t.  The FP
    ratio of an image is the fraction of its negative cells (farther than the
    ambiguity radius from every point) with value >= t; images without negative
    cells are left out of the mean.
    """
    records = list(records)
    th = default_thresholds(records) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    th = np.sort(th)[::-1]
    pv = np.concatenate([r.point_values() for r in records]) if records else np.zeros(0)
    pv_sorted = np.sort(pv)
    n_points = len(pv)
    recall = (
        (n_points - np.searchsorted(pv_sorted, th, side="left")) / n_points
        if n_points else np.zeros(len(th))
    )
    fp_sum = np.zeros(len(th))
    used = excluded = 0
    for r in records:
        neg = np.sort(r.heatmap[r.negative])
        if neg.size == 0:
            excluded += 1
            continue
        fp_sum += (neg.size - np.searchsorted(neg, th, side="left")) / neg.size
        used += 1
    if excluded:
        log.warning("%d image(s) without negative region excluded from the FP mean", excluded)
    fp = fp_sum / used if used else np.zeros(len(th))
    return FrocCurve(th, recall, fp, n_points, used, excluded)


def recall_at_fp(curve: FrocCurve, fp: float) -> float:
    """Recall linearly interpolated at a false-positive ratio on the curve."""
    x = curve.fp_ratio
    y = curve.recall
    below = x <= fp
    if not np.any(below):
        return 0.0
    i = np.flatnonzero(below)
    x0 = x[i].max()
    r0 = y[i][x[i] == x0].max()
    above = ~below
    if not np.any(above):
        return float(r0)
    x1 = x[above].min()
    r1 = y[above][x[above] == x1].min()
    if x1 == x0:
        return float(r0)
    return float(r0 + (r1 - r0) * (fp - x0) / (x1 - x0))


def classification_report(records) -> dict:
    scores = [image_score(r.heatmap) for r in records]
    labels = [r.label for r in records]
    curve = modified_froc(records)
    return {
        "auc": auc(scores, labels),
        "ap": average_precision(scores, labels),
        "recall_fp1": recall_at_fp(curve, 0.01),
        "recall_fp10": recall_at_fp(curve, 0.10),
    }, curve


def write_report(path, metrics: dict, curve: FrocCurve | None = None, header: str = "") -> None:
    """Commented ``header`` lines, a tab-separated ``metric value`` table, then the FROC rows."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in header.splitlines():
            fh.write(f"# {line}\n")
        fh.write("metric\tvalue\n")
        for k, v in metrics.items():
            fh.write(f"{k}\t{v:.10f}\n")
        if curve is not None:
            fh.write("\nthreshold\trecall\tfp_ratio\n")
            for t, r, f in curve.rows():
                fh.write(f"{t:.10f}\t{r:.10f}\t{f:.10f}\n")

