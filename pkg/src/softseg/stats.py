"""Two-sided Wilcoxon signed-rank test for paired samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import ShapeError

EXACT_MAX_N = 25


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of the positive differences
    p_value: float
    n: int  # pairs left after dropping zero differences
    method: str  # "exact", "normal" or "degenerate"
    degenerate: bool = False


def _exact_p(ranks, t_plus):
    """Two-sided p from the exact null distribution of T+ under random signs.

    Mid-ranks are multiples of 1/2, so doubled ranks are integers and the
    distribution is a subset-sum count.
    """
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts += shifted
    counts /= counts.sum()
    t2 = int(round(2 * t_plus))
    lower = counts[: t2 + 1].sum()
    upper = counts[t2:].sum()
    return min(1.0, 2.0 * min(lower, upper))


def _normal_p(ranks, t_plus):
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(t_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, 2.0 * float(sps.norm.sf(z)))


def wilcoxon_signed_rank(a, b, method="auto") -> WilcoxonResult:
    """Paired two-sided test; zero differences are dropped, ties get mid-ranks.

    ``method`` is "auto" (exact up to 25 pairs, normal approximation with tie
    and continuity corrections beyond), "exact" or "normal".
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"paired samples differ in length: {a.size} vs {b.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("paired samples must be finite")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", degenerate=True)
    ranks = sps.rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = _exact_p(ranks, t_plus)
    elif method == "normal":
        p = _normal_p(ranks, t_plus)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(t_plus, float(p), int(n), method)
