"""
Cross-validated comparison of the training candidates.

Result store layout::

    <out>/plan.yaml                      effective configuration
    <out>/runs/it003_Soft-ReLU-Wing/     one directory per (iteration, candidate)
        checkpoint.ckpt  history.csv  thresholds.csv
        metrics.csv      distribution.csv  metadata.json

``metadata.json`` is written last and carries ``stage`` ("trained" or
"evaluated"), so a run is complete exactly when its stage is "evaluated".
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import yaml

from .candidates import (  # noqa: F401  (re-exported)
    CANDIDATE_NAMES,
    CONVENTIONAL,
    SOFTSEG,
    CandidateConfig,
    canonical_candidates,
    candidate_to_dict,
    get_candidate,
)
from .config import RunConfig
from .errors import ConfigurationError, StateError
from .evaluate import (
    boundary_soft_mse,
    optimize_threshold,
    softness_score,
    subject_metrics,
    value_distribution,
)
from .nn import load_checkpoint, save_checkpoint
from .phantom import read_dataset
from .trainer import predict_processed, train
from .volio import preprocess, to_native

log = logging.getLogger(__name__)

PLAN_FILE = "plan.yaml"
RUNS_DIR = "runs"
METRIC_FIELDS = ("dice", "precision", "recall", "avd", "rvd", "mse", "ltpr", "lfdr", "softness", "boundary_mse")


class SplitScheme(str, Enum):
    CENTER_WISE = "CenterWise"
    PATIENT_WISE = "PatientWise"


@dataclass(frozen=True)
class Split:
    train: tuple
    val: tuple
    test: tuple

    def check(self, all_ids=None):
        sets = [set(self.train), set(self.val), set(self.test)]
        if any(not s for s in sets):
            raise ConfigurationError("every split needs at least one subject")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise StateError("train/val/test splits overlap")
        if all_ids is not None and set().union(*sets) != set(all_ids):
            raise StateError("splits do not cover the dataset")
        return self

    def as_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def iteration_seed(base_seed: int, iteration: int) -> int:
    """Seed shared by every candidate of one iteration (matched comparisons)."""
    return int(np.random.SeedSequence([int(base_seed), int(iteration)]).generate_state(1)[0])


def make_splits(subjects, scheme, iteration: int, base_seed: int = 0) -> Split:
    """Disjoint train/val/test id lists for one iteration.

    Center-wise: the test center cycles with the iteration index and the
    remaining centers are shuffled into one validation center and the rest for
    training. Patient-wise: a seeded 60/20/20 shuffle.
    """
    scheme = SplitScheme(scheme)
    rng = np.random.default_rng(np.random.SeedSequence([int(base_seed), int(iteration), 0x5B117]))
    ids = sorted(s.id for s in subjects)
    if scheme is SplitScheme.CENTER_WISE:
        centers = sorted({s.center_id for s in subjects})
        if len(centers) < 4:
            raise ConfigurationError(f"center-wise splitting needs >= 4 centers, got {len(centers)}")
        test_c = centers[iteration % len(centers)]
        rest = [c for c in centers if c != test_c]
        rest = [rest[i] for i in rng.permutation(len(rest))]
        val_c, train_c = {rest[0]}, set(rest[1:])
        by = {s.id: s.center_id for s in subjects}
        split = Split(
            tuple(i for i in ids if by[i] in train_c),
            tuple(i for i in ids if by[i] in val_c),
            tuple(i for i in ids if by[i] == test_c),
        )
    else:
        n = len(ids)
        n_test = n_val = int(math.floor(0.2 * n + 0.5))
        if n < 3 or n_test < 1 or n - 2 * n_test < 1:
            raise ConfigurationError(f"patient-wise splitting needs >= 5 subjects, got {n}")
        order = [ids[i] for i in rng.permutation(n)]
        split = Split(
            tuple(sorted(order[: n - n_val - n_test])),
            tuple(sorted(order[n - n_val - n_test : n - n_test])),
            tuple(sorted(order[n - n_test :])),
        )
    return split.check(ids)


@dataclass(frozen=True)
class ExperimentPlan:
    config: RunConfig

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigurationError("n_iterations must be >= 1")

    @property
    def scheme(self) -> SplitScheme:
        return SplitScheme(self.config.effective["experiment"]["scheme"])

    @property
    def n_iterations(self) -> int:
        return int(self.config.effective["experiment"]["iterations"])

    @property
    def candidates(self) -> list:
        return self.config.candidates

    @property
    def plan_hash(self) -> str:
        return self.config.digest()

    def run_keys(self):
        return [(k, name) for k in range(self.n_iterations) for name in self.candidates]


def run_dir_name(iteration: int, candidate: str) -> str:
    return f"it{iteration:03d}_{candidate}"


# -- file helpers ------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return "" if not math.isfinite(float(x)) else repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(float(obj)) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_metadata(run_dir) -> dict:
    path = Path(run_dir) / "metadata.json"
    if not path.exists():
        raise StateError(f"{run_dir} has no metadata.json")
    return json.loads(path.read_text(encoding="utf-8"))


def load_subjects(config: RunConfig):
    if not config.dataset:
        raise ConfigurationError("configuration does not name a dataset")
    return read_dataset(config.dataset)


def _processed(subjects, ids, tcfg):
    by = {s.id: s for s in subjects}
    return [preprocess(by[i], tcfg.target_spacing, tcfg.crop) for i in ids]


# -- one run -----------------------------------------------------------------------


def train_run(config: RunConfig, candidate_name: str, iteration: int, run_dir, subjects=None, progress=None):
    """Split, train and persist checkpoint, history and metadata; returns the TrainHistory."""
    candidate = get_candidate(candidate_name, config.awing())
    subjects = load_subjects(config) if subjects is None else subjects
    plan_scheme = config.effective["experiment"]["scheme"]
    split = make_splits(subjects, plan_scheme, iteration, config.seed)
    seed = iteration_seed(config.seed, iteration)
    tcfg = config.train_config(seed=seed)
    train_p = _processed(subjects, split.train, tcfg)
    val_p = _processed(subjects, split.val, tcfg)
    tcfg = replace(tcfg, unet=replace(tcfg.unet, in_channels=int(train_p[0].images.shape[0])))
    model, hist = train(train_p, val_p, candidate, tcfg, progress=progress)

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, run_dir / "checkpoint.ckpt", extra={"candidate": candidate.name, "iteration": iteration})
    hist.write_csv(run_dir / "history.csv")
    meta = {
        "stage": "trained",
        "plan_hash": config.digest(),
        "iteration": iteration,
        "iteration_seed": seed,
        "candidate": candidate_to_dict(candidate),
        "config": config.effective,
        "split": split.as_dict(),
        "scheme": plan_scheme,
        "training": hist.summary(),
        "converged": hist.converged,
        "inference": {
            "norm_relu_normalization": "per 2D slice, in training and at inference",
            "back_mapping": "zero-fill uncrop, then linear resampling to the native grid",
        },
    }
    write_json(run_dir / "metadata.json", meta)
    return hist


def evaluate_run(run_dir, subjects=None, split_name="test"):
    """Threshold sweep on train+val, then metrics and value distributions on ``split_name``."""
    run_dir = Path(run_dir)
    meta = read_metadata(run_dir)
    ckpt = run_dir / "checkpoint.ckpt"
    if not ckpt.exists():
        raise StateError(f"{run_dir} has no checkpoint")
    config = RunConfig.from_dict(meta["config"])
    candidate = get_candidate(meta["candidate"]["name"], config.awing())
    subjects = load_subjects(config) if subjects is None else subjects
    by = {s.id: s for s in subjects}
    split = meta["split"]
    if split_name not in split:
        raise ConfigurationError(f"unknown split {split_name!r}")
    if set(split["train"] + split["val"]) & set(split["test"]):
        raise StateError("test subjects leaked into train/val")
    tcfg = config.train_config()
    model = load_checkpoint(ckpt)

    def native_prediction(sid):
        p = preprocess(by[sid], tcfg.target_spacing, tcfg.crop)
        return to_native(predict_processed(model, candidate, p), p).data

    fit_ids = split["train"] + split["val"]
    sweep = optimize_threshold([native_prediction(i) for i in fit_ids], [by[i].hard_gt for i in fit_ids])
    write_csv(run_dir / "thresholds.csv", ["threshold", "mean_dice"], zip(sweep.thresholds, sweep.mean_dice))

    lesions = bool(config.effective["evaluation"]["lesion_metrics"])
    rows, pooled = [], []
    for sid in split[split_name]:
        s = by[sid]
        pred = native_prediction(sid)
        if pred.shape != s.gt.data.shape:
            raise StateError(f"{sid}: prediction grid {pred.shape} != native grid {s.gt.data.shape}")
        rec = subject_metrics(sid, pred, s.hard_gt, sweep.best, lesions=lesions)
        soft = softness_score(pred)
        bmse = boundary_soft_mse(pred, s.gt.data)
        rows.append([sid, s.center_id, rec.threshold, rec.dice, rec.precision, rec.recall, rec.avd, rec.rvd, rec.mse, rec.ltpr, rec.lfdr, soft, bmse])
        pooled.append(pred.ravel())
    write_csv(run_dir / "metrics.csv", ["subject", "center", "threshold", *METRIC_FIELDS], rows)

    dist = value_distribution(np.concatenate(pooled))
    write_csv(run_dir / "distribution.csv", ["value", "density"], zip(dist.grid, dist.density))
    meta["stage"] = "evaluated"
    meta["evaluation"] = {
        "split": split_name,
        "threshold": sweep.best,
        "softness": dist.softness,
        "n_nonzero": dist.n_nonzero,
        "mse_region": "full native volume",
        "lesion_criterion": f">= {config.effective['evaluation']['lesion_min_overlap_voxels']} overlapping voxel(s)",
    }
    write_json(run_dir / "metadata.json", meta)
    return rows


# -- whole experiment --------------------------------------------------------------


def _run_one(effective, candidate, iteration, run_dir):
    config = RunConfig.from_dict(effective)
    subjects = load_subjects(config)
    run_dir = Path(run_dir)
    if run_dir.exists():
        try:
            stage = read_metadata(run_dir).get("stage")
        except StateError:
            stage = None
        if stage != "trained" or not (run_dir / "checkpoint.ckpt").exists():
            shutil.rmtree(run_dir)
    if not (run_dir / "metadata.json").exists():
        train_run(config, candidate, iteration, run_dir, subjects=subjects)
    evaluate_run(run_dir, subjects=subjects)
    return run_dir.name


def _is_complete(run_dir) -> bool:
    try:
        return read_metadata(run_dir).get("stage") == "evaluated"
    except StateError:
        return False


def run_experiment(plan: ExperimentPlan, out_dir, resume=False, jobs=1) -> Path:
    """Train and evaluate every (iteration, candidate) run of ``plan`` into ``out_dir``.

    Without ``resume`` an existing result store is never overwritten; with it,
    completed runs are kept and only missing ones are computed.
    """
    out_dir = Path(out_dir)
    plan_file = out_dir / PLAN_FILE
    runs = out_dir / RUNS_DIR
    if plan_file.exists():
        stored = RunConfig.from_dict(yaml.safe_load(plan_file.read_text(encoding="utf-8")))
        if stored.digest() != plan.plan_hash:
            raise ConfigurationError(f"{out_dir} holds results of a different plan ({stored.digest()})")
        if not resume:
            raise ConfigurationError(f"{out_dir} already holds results; pass --resume to continue")
    elif runs.exists() and any(runs.iterdir()) and not resume:
        raise ConfigurationError(f"{out_dir} already holds runs; pass --resume to continue")
    out_dir.mkdir(parents=True, exist_ok=True)
    plan_file.write_text(plan.config.to_yaml(), encoding="utf-8")
    runs.mkdir(exist_ok=True)

    todo = [(k, c) for k, c in plan.run_keys() if not _is_complete(runs / run_dir_name(k, c))]
    log.info("%d of %d runs to compute", len(todo), len(plan.run_keys()))
    args = [(plan.config.effective, c, k, str(runs / run_dir_name(k, c))) for k, c in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for name in pool.map(_run_one, *zip(*args)):
                log.info("finished %s", name)
    else:
        for a in args:
            log.info("finished %s", _run_one(*a))
    return out_dir

