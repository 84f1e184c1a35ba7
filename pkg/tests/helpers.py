"""Test helpers that exercise package code (unlike oracles.py)."""

import numpy as np

from softseg.nn import UNetConfig, build_unet


def eval_mode_unet(seed=3, in_channels=1, base_filters=3, depth=1):
    """float64 U-Net with randomised BN statistics, for finite-difference checks.

    Shifting BN so that most pre-activations sit away from zero keeps
    central differences from straddling ReLU kinks.
    """
    model = build_unet(UNetConfig(depth=depth, in_channels=in_channels, base_filters=base_filters, dropout_rate=0.0), seed=seed, dtype=np.float64)
    r = np.random.default_rng(seed + 100)
    state = model.state_dict()
    for name, arr in state.items():
        if name.endswith("running_mean"):
            state[name] = r.normal(0.0, 0.3, arr.shape)
        elif name.endswith("running_var"):
            state[name] = r.uniform(0.5, 2.0, arr.shape)
        elif name.endswith("bn.beta"):
            state[name] = r.uniform(0.2, 0.6, arr.shape)
        elif name.endswith("bn.gamma"):
            state[name] = r.uniform(0.5, 1.5, arr.shape)
        elif name.endswith("bias"):
            state[name] = r.normal(0.0, 0.1, arr.shape)
    model.load_state_dict(state)
    return model


def unet_gradient_errors(model, x, weights, h=1e-6):
    """Per-parameter relative error of backprop vs central differences of sum(logits * weights)."""

    def loss():
        return float((model.forward(x, training=False) * weights).sum())

    model.forward(x, training=False)
    analytic = {k: v.copy() for k, v in model.backward(weights).items()}
    errors = {}
    for name, t in model.parameters().items():
        numeric = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = t.data[i]
            t.data[i] = orig + h
            lp = loss()
            t.data[i] = orig - h
            lm = loss()
            t.data[i] = orig
            numeric[i] = (lp - lm) / (2 * h)
        denom = np.linalg.norm(numeric) + np.linalg.norm(analytic[name])
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(numeric - analytic[name]) / denom)
    return errors


def tiny_config(dataset, output_dir, iterations=2, candidates=None, **sections):
    """A run configuration small enough to train in well under a second per run."""
    raw = {
        "dataset": str(dataset),
        "output_dir": str(output_dir),
        "seed": 3,
        "preprocessing": {"resample_mm": [0.5, 0.5, 2.0], "crop": [32, 32]},
        "model": {"depth": 1, "base_filters": 4, "dropout": 0.0},
        "training": {"batch_size": 4, "lr0": 0.003, "max_epochs": 2, "early_stopping": {"patience": 2}},
        "experiment": {"iterations": iterations},
    }
    if candidates is not None:
        raw["experiment"]["candidates"] = list(candidates)
    for key, value in sections.items():
        raw[key] = {**raw.get(key, {}), **value} if isinstance(value, dict) else value
    return raw


def write_fake_run(runs_dir, candidate, iteration, values, converged=True, n_subjects=2, spread=None):
    """An evaluated run directory whose per-subject metrics average to ``values``.

    Subjects get ``v - d`` and ``v + d`` pairs so the run mean is ``v`` exactly.
    """
    from softseg.experiment import METRIC_FIELDS, run_dir_name, write_csv, write_json

    spread = spread or {}
    d = runs_dir / run_dir_name(iteration, candidate)
    d.mkdir(parents=True)
    rows = []
    for i in range(n_subjects):
        sign = -1 if i % 2 == 0 else 1
        row = [f"s{i}", "c1", 0.5]
        for m in METRIC_FIELDS:
            v = values.get(m, float("nan"))
            row.append(v + sign * spread.get(m, 0.0))
        rows.append(row)
    write_csv(d / "metrics.csv", ["subject", "center", "threshold", *METRIC_FIELDS], rows)
    grid = np.linspace(0.05, 0.95, 19)
    write_csv(d / "thresholds.csv", ["threshold", "mean_dice"], zip(np.round(grid, 2), 80 + 10 * grid))
    xs = np.linspace(-0.1, 1.1, 241)
    write_csv(d / "distribution.csv", ["value", "density"], zip(xs, np.full(241, 1 / 1.2)))
    meta = {
        "stage": "evaluated",
        "candidate": {"name": candidate},
        "iteration": iteration,
        "converged": converged,
        "evaluation": {"threshold": 0.5},
    }
    write_json(d / "metadata.json", meta)
    return d


def golden_store(root):
    """Fixed two-iteration store: run means follow simple formulas in (candidate index c, iteration k)."""
    from softseg.candidates import CANDIDATE_NAMES

    runs = root / "runs"
    for c, name in enumerate(CANDIDATE_NAMES):
        for k in range(2):
            values = {
                "dice": 80.0 + 2 * c + 2 * k,
                "precision": 90.0 - c + 4 * k,
                "recall": 70.0 + c,
                "avd": 10.0 + 2 * k,
                "rvd": -5.0 + 10 * k,
                "mse": 0.1 + 0.002 * k + 0.001 * c,
                "softness": 0.1 * c,
                "boundary_mse": 1.0,
            }
            write_fake_run(runs, name, k, values, spread={"dice": 0.5, "mse": 0.0005})
    return root
