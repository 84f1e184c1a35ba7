"""
Aggregate a result store into per-candidate tables and curves.

Each run contributes one value per metric: the mean over its test subjects.
Candidates are compared with the reference candidate by a Wilcoxon
signed-rank test paired on the iteration index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .candidates import CANDIDATE_NAMES, CONVENTIONAL, SOFTSEG
from .errors import StateError
from .experiment import RUNS_DIR, read_csv, read_metadata, write_csv, write_json
from .stats import wilcoxon_signed_rank

SIGNIFICANCE_LEVEL = 0.05
SIGNIFICANCE_MARK = " **"

# (metric field, column header, decimals)
VOXEL_COLUMNS = (
    ("dice", "Dice [%]", 1),
    ("precision", "Precision [%]", 1),
    ("recall", "Recall [%]", 1),
    ("avd", "Absolute Volume Difference [%]", 1),
    ("rvd", "Relative Volume Difference [%]", 1),
    ("mse", "MSE [%]", 3),
)
LESION_COLUMNS = (
    ("dice", "Dice [%]", 1),
    ("precision", "Precision [%]", 1),
    ("recall", "Recall [%]", 1),
    ("lfdr", "LFDR [%]", 1),
    ("ltpr", "LTPR [%]", 1),
)
EXTRA_FIELDS = ("softness", "boundary_mse")
ROW_LABELS = {CONVENTIONAL: f"{CONVENTIONAL} (Conventional)", SOFTSEG: f"{SOFTSEG} (SoftSeg)"}


def _float(s):
    return float(s) if s not in ("", None) else math.nan


@dataclass
class RunRecord:
    candidate: str
    iteration: int
    converged: bool
    threshold: float
    values: dict  # metric -> mean over test subjects
    thresholds: np.ndarray = field(repr=False, default=None)
    threshold_dice: np.ndarray = field(repr=False, default=None)
    grid: np.ndarray = field(repr=False, default=None)
    density: np.ndarray = field(repr=False, default=None)


def _nanmean(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


def load_runs(results_dir) -> list:
    runs_dir = Path(results_dir) / RUNS_DIR
    if not runs_dir.is_dir():
        raise StateError(f"{results_dir} has no {RUNS_DIR}/ directory")
    records = []
    for run in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
        try:
            meta = read_metadata(run)
        except StateError:
            continue
        if meta.get("stage") != "evaluated":
            continue
        rows = read_csv(run / "metrics.csv")
        metric_names = [k for k in rows[0] if k not in ("subject", "center", "threshold")] if rows else []
        values = {m: _nanmean([_float(r[m]) for r in rows]) for m in metric_names}
        th = read_csv(run / "thresholds.csv")
        dist = read_csv(run / "distribution.csv")
        records.append(
            RunRecord(
                candidate=meta["candidate"]["name"],
                iteration=int(meta["iteration"]),
                converged=bool(meta["converged"]),
                threshold=float(meta["evaluation"]["threshold"]),
                values=values,
                thresholds=np.array([_float(r["threshold"]) for r in th]),
                threshold_dice=np.array([_float(r["mean_dice"]) for r in th]),
                grid=np.array([_float(r["value"]) for r in dist]),
                density=np.array([_float(r["density"]) for r in dist]),
            )
        )
    if not records:
        raise StateError(f"{results_dir} holds no evaluated runs")
    return records


def _candidate_order(records):
    present = {r.candidate for r in records}
    return [c for c in CANDIDATE_NAMES if c in present]


def mean_std(values):
    """Mean and population standard deviation of the finite values."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def format_cell(mean, std, decimals, marked):
    if not math.isfinite(mean):
        return "n/a"
    cell = f"{mean:.{decimals}f} ± {std:.{decimals}f}"
    return cell + SIGNIFICANCE_MARK if marked else cell


def paired_values(records, candidate, reference, metric):
    """Per-iteration values of both candidates on iterations where both converged."""
    a = {r.iteration: r.values.get(metric, math.nan) for r in records if r.candidate == candidate and r.converged}
    b = {r.iteration: r.values.get(metric, math.nan) for r in records if r.candidate == reference and r.converged}
    its = sorted(k for k in a.keys() & b.keys() if math.isfinite(a[k]) and math.isfinite(b[k]))
    return np.array([a[k] for k in its]), np.array([b[k] for k in its]), its


def significance(records, columns, reference=SOFTSEG):
    """{(candidate, metric): WilcoxonResult or None} for every non-reference candidate."""
    out = {}
    for cand in _candidate_order(records):
        if cand == reference:
            continue
        for metric, _, _ in columns:
            a, b, _ = paired_values(records, cand, reference, metric)
            out[(cand, metric)] = wilcoxon_signed_rank(a, b) if a.size else None
    return out


def summary_rows(records, columns, tests, include_failures=False):
    header = ["Candidate"] + [h for _, h, _ in columns] + ["Convergence rate [%]", "Runs"]
    rows = []
    for cand in _candidate_order(records):
        runs = [r for r in records if r.candidate == cand]
        used = runs if include_failures else [r for r in runs if r.converged]
        row = [ROW_LABELS.get(cand, cand)]
        for metric, _, dec in columns:
            mean, std = mean_std([r.values.get(metric, math.nan) for r in used])
            res = tests.get((cand, metric))
            row.append(format_cell(mean, std, dec, res is not None and res.p_value <= SIGNIFICANCE_LEVEL))
        conv = 100.0 * sum(r.converged for r in runs) / len(runs)
        row += [f"{conv:.1f}", str(len(runs))]
        rows.append(row)
    return header, rows


def _svg_lines(series, path, x_label, y_label, x_range=None):
    """Minimal dependency-free line plot; ``series`` is [(label, x, y)]."""
    w, h, m = 640, 400, 50
    xs = np.concatenate([np.asarray(x, float) for _, x, _ in series])
    ys = np.concatenate([np.asarray(y, float) for _, _, y in series])
    ys = ys[np.isfinite(ys)]
    x0, x1 = x_range or (float(xs.min()), float(xs.max()))
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if y1 <= y0:
        y1 = y0 + 1.0
    colors = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd")

    def px(x, y):
        return m + (x - x0) / (x1 - x0) * (w - 2 * m), h - m - (y - y0) / (y1 - y0) * (h - 2 * m)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">',
        f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="#444"/>',
        f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle">{x_label}</text>',
        f'<text x="14" y="{h / 2}" text-anchor="middle" transform="rotate(-90 14 {h / 2})">{y_label}</text>',
        f'<text x="{m}" y="{h - m + 14}">{x0:.2f}</text><text x="{w - m}" y="{h - m + 14}" text-anchor="end">{x1:.2f}</text>',
        f'<text x="{m - 4}" y="{h - m}" text-anchor="end">{y0:.2f}</text><text x="{m - 4}" y="{m + 4}" text-anchor="end">{y1:.2f}</text>',
    ]
    for i, (label, x, y) in enumerate(series):
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in (px(u, v) for u, v in zip(x, y) if math.isfinite(v)))
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{w - m - 4}" y="{m + 14 + 13 * i}" text-anchor="end" fill="{color}">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def report(results_dir, out_dir=None, lesions=None, svg=False, reference=SOFTSEG) -> dict:
    """Write summary, significance, curve and per-run tables; returns their paths."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else results_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_runs(results_dir)
    if lesions is None:
        lesions = any(math.isfinite(r.values.get("ltpr", math.nan)) for r in records)
    columns = LESION_COLUMNS if lesions else VOXEL_COLUMNS
    tests = significance(records, columns, reference)
    order = _candidate_order(records)
    paths = {}

    header, rows = summary_rows(records, columns, tests)
    paths["summary"] = out_dir / "summary.csv"
    write_csv(paths["summary"], header, rows)
    header, rows = summary_rows(records, columns, tests, include_failures=True)
    paths["summary_with_failures"] = out_dir / "summary_with_failures.csv"
    write_csv(paths["summary_with_failures"], header, rows)

    sig_rows = []
    for (cand, metric), res in tests.items():
        if res is None:
            sig_rows.append([cand, reference, metric, 0, math.nan, math.nan, "none", False])
        else:
            sig_rows.append([cand, reference, metric, res.n, res.statistic, res.p_value, res.method, res.p_value <= SIGNIFICANCE_LEVEL])
    paths["significance"] = out_dir / "significance.csv"
    write_csv(paths["significance"], ["candidate", "reference", "metric", "n_pairs", "statistic", "p_value", "method", "significant"], sig_rows)

    per_run = []
    metric_names = [m for m, _, _ in columns] + list(EXTRA_FIELDS)
    for r in sorted(records, key=lambda r: (order.index(r.candidate), r.iteration)):
        per_run.append([r.candidate, r.iteration, r.converged, r.threshold] + [r.values.get(m, math.nan) for m in metric_names])
    paths["per_iteration"] = out_dir / "per_iteration.csv"
    write_csv(paths["per_iteration"], ["candidate", "iteration", "converged", "threshold"] + metric_names, per_run)

    curve_rows, dist_rows, curves, dists = [], [], [], []
    for cand in order:
        runs = [r for r in records if r.candidate == cand and r.converged]
        if not runs:
            continue
        t = runs[0].thresholds
        dice = np.array([r.threshold_dice for r in runs])
        curve_rows += [[cand, a, b, c] for a, b, c in zip(t, dice.mean(0), dice.std(0))]
        curves.append((cand, t, dice.mean(0)))
        g = runs[0].grid
        dens = np.array([r.density for r in runs]).mean(0)
        soft = _nanmean([r.values.get("softness", math.nan) for r in runs])
        dist_rows += [[cand, a, b, soft] for a, b in zip(g, dens)]
        dists.append((cand, g, dens))
    paths["threshold_curves"] = out_dir / "threshold_curves.csv"
    write_csv(paths["threshold_curves"], ["candidate", "threshold", "mean_dice", "std_dice"], curve_rows)
    paths["distributions"] = out_dir / "distributions.csv"
    write_csv(paths["distributions"], ["candidate", "value", "density", "softness"], dist_rows)

    meta = {
        "reference": reference,
        "significance_level": SIGNIFICANCE_LEVEL,
        "pairing_unit": "iteration (mean over test subjects); per-subject pairing is the alternative",
        "std": "population (ddof=0) over converged iterations",
        "columns": [h for _, h, _ in columns],
    }
    paths["report_meta"] = out_dir / "report.json"
    write_json(paths["report_meta"], meta)

    if svg:
        if curves:
            paths["threshold_svg"] = out_dir / "threshold_curves.svg"
            _svg_lines(curves, paths["threshold_svg"], "threshold", "mean Dice [%]", (0.0, 1.0))
        if dists:
            paths["distributions_svg"] = out_dir / "distributions.svg"
            _svg_lines(dists, paths["distributions_svg"], "prediction value", "density")
    return paths
