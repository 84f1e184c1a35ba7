"""
Binarisation, voxel-wise and lesion-wise metrics, threshold search and
prediction-value distributions. All scores are in percent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, stats

from .errors import ShapeError

THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))
SOFT_BAND = (0.1, 0.9)
N_BINS = 100


@dataclass
class MetricsRecord:
    subject_id: str
    threshold: float
    dice: float
    precision: float
    recall: float
    avd: float
    rvd: float
    mse: float
    ltpr: float = math.nan
    lfdr: float = math.nan

    def as_row(self):
        return asdict(self)


@dataclass
class ThresholdSweep:
    thresholds: tuple
    mean_dice: np.ndarray
    best: float
    per_subject: np.ndarray = field(default=None, repr=False)


def binarize(pred, tau):
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    return (np.asarray(pred) >= tau).astype(np.uint8)


def _counts(pred_bin, gt_bin):
    p = np.asarray(pred_bin).astype(bool)
    g = np.asarray(gt_bin).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction grid {p.shape} != ground-truth grid {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, p, g


def dice_score(pred_bin, gt_bin, empty=100.0):
    """200 TP / (2 TP + FP + FN); both masks empty scores ``empty``."""
    tp, fp, fn, _, _ = _counts(pred_bin, gt_bin)
    denom = 2 * tp + fp + fn
    return empty if denom == 0 else 200.0 * tp / denom


def voxel_metrics(pred_bin, gt_bin):
    """(dice, precision, recall, avd, rvd, mse), NaN where a denominator vanishes.

    RVD is (Vg - Vp) / Vg so over-segmentation is negative.
    """
    tp, fp, fn, p, g = _counts(pred_bin, gt_bin)
    vp, vg = tp + fp, tp + fn
    dice = dice_score(p, g)
    precision = 100.0 * tp / vp if vp else math.nan
    recall = 100.0 * tp / vg if vg else math.nan
    avd = 100.0 * abs(vg - vp) / vg if vg else math.nan
    rvd = 100.0 * (vg - vp) / vg if vg else math.nan
    mse = 100.0 * (fp + fn) / p.size
    return dice, precision, recall, avd, rvd, mse


def connectivity_structure(ndim):
    """18-connectivity in 3D, 8-connectivity in 2D."""
    if ndim == 3:
        return ndimage.generate_binary_structure(3, 2)
    if ndim == 2:
        return ndimage.generate_binary_structure(2, 2)
    raise ShapeError(f"connected components need a 2D or 3D mask, got {ndim}D")


def connected_components(mask_bin, structure=None):
    """Label components 1..K in scan order; returns (labels, K)."""
    mask = np.asarray(mask_bin).astype(bool)
    if structure is None:
        structure = connectivity_structure(mask.ndim)
    labels, k = ndimage.label(mask, structure=structure)
    return labels, int(k)


def lesion_metrics(pred_bin, gt_bin, min_overlap_voxels=1):
    """(LTPR, LFDR) in percent; NaN when there is no GT / predicted lesion."""
    _, _, _, p, g = _counts(pred_bin, gt_bin)
    gl, ng = connected_components(g)
    pl, npred = connected_components(p)
    if ng:
        hits = np.bincount(gl[p].ravel(), minlength=ng + 1)[1:]
        ltpr = 100.0 * np.count_nonzero(hits >= min_overlap_voxels) / ng
    else:
        ltpr = math.nan
    if npred:
        overlap = np.bincount(pl[g].ravel(), minlength=npred + 1)[1:]
        lfdr = 100.0 * np.count_nonzero(overlap == 0) / npred
    else:
        lfdr = math.nan
    return ltpr, lfdr


def subject_metrics(subject_id, pred_soft, gt_bin, tau, lesions=False) -> MetricsRecord:
    pb = binarize(pred_soft, tau)
    rec = MetricsRecord(subject_id, float(tau), *voxel_metrics(pb, gt_bin))
    if lesions:
        rec.ltpr, rec.lfdr = lesion_metrics(pb, gt_bin)
    return rec


def optimize_threshold(preds, gts, thresholds=THRESHOLDS) -> ThresholdSweep:
    """Pick the grid threshold with the best mean subject Dice; ties go low."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need one or more matched prediction/GT pairs")
    table = np.empty((len(preds), len(thresholds)))
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p)
        g = np.asarray(g).astype(bool)
        for j, t in enumerate(thresholds):
            table[i, j] = dice_score(p >= t, g)
    mean = table.mean(axis=0)
    best = thresholds[int(np.argmax(mean))]  # argmax returns the first maximum
    return ThresholdSweep(tuple(thresholds), mean, float(best), table)


# -- prediction value distribution ---------------------------------------------------


@dataclass
class ValueDistribution:
    bin_edges: np.ndarray
    hist: np.ndarray
    grid: np.ndarray
    density: np.ndarray
    softness: float
    n_nonzero: int
    empty: bool = False


def softness_score(pred):
    v = np.asarray(pred, dtype=np.float64).ravel()
    v = v[v > 0]
    if v.size == 0:
        return math.nan
    lo, hi = SOFT_BAND
    return float(np.count_nonzero((v > lo) & (v < hi)) / v.size)


def value_distribution(pred, n_bins=N_BINS, grid_points=241, max_kde_samples=20000, seed=0) -> ValueDistribution:
    """Histogram on (0, 1] and a Silverman-bandwidth Gaussian KDE of non-zero values.

    The KDE curve is normalised to unit area on its evaluation grid, which
    extends slightly past [0, 1] as kernel tails do.
    """
    v = np.asarray(pred, dtype=np.float64).ravel()
    v = v[v > 0]
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    grid = np.linspace(-0.1, 1.1, grid_points)
    if v.size == 0:
        return ValueDistribution(edges, np.zeros(n_bins), grid, np.zeros(grid_points), math.nan, 0, empty=True)
    hist, _ = np.histogram(np.clip(v, 0.0, 1.0), bins=edges)
    hist = hist / v.size
    sample = v
    if v.size > max_kde_samples:
        sample = np.random.default_rng(seed).choice(v, size=max_kde_samples, replace=False)
    if sample.size > 1 and np.ptp(sample) > 0:
        density = stats.gaussian_kde(sample, bw_method="silverman")(grid)
    else:
        density = np.zeros(grid_points)
        density[int(np.argmin(np.abs(grid - sample[0])))] = 1.0
    area = np.trapezoid(density, grid) if density.sum() else 0.0
    if area > 0:
        density = density / area
    return ValueDistribution(edges, hist, grid, density, softness_score(v), int(v.size))


def boundary_mask(soft_gt):
    """Voxels whose exact soft label is strictly fractional."""
    s = np.asarray(soft_gt)
    return (s > 0) & (s < 1)


def boundary_soft_mse(pred_soft, soft_gt):
    """Mean squared error between un-binarised prediction and exact soft GT on boundary voxels (percent)."""
    pred_soft, soft_gt = np.asarray(pred_soft, np.float64), np.asarray(soft_gt, np.float64)
    if pred_soft.shape != soft_gt.shape:
        raise ShapeError("prediction and soft ground truth must share a grid")
    m = boundary_mask(soft_gt)
    if not m.any():
        return math.nan
    return float(100.0 * np.mean((pred_soft[m] - soft_gt[m]) ** 2))
