"""
Command-line entry point.

Exit codes: 0 success, 1 error, 2 training finished but did not converge.
Relative output directories are placed under ``$SOFTSEG_OUTPUT_ROOT`` when
that variable is set, otherwise under the working directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import jsonschema
import yaml

from .candidates import CANDIDATE_NAMES
from .config import load_config
from .errors import SoftSegError
from .experiment import ExperimentPlan, RUNS_DIR, evaluate_run, run_dir_name, run_experiment, train_run
from .phantom import CenterProfile, PhantomSpec, default_centers, gen_dataset, spec_to_dict, write_dataset
from .report import report

OUTPUT_ROOT_ENV = "SOFTSEG_OUTPUT_ROOT"
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

_pair = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
PHANTOM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "task": {"enum": ["SingleBlob", "MultiLesion"]},
                "field_of_view_mm": {"type": "number", "exclusiveMinimum": 0},
                "n_slices": {"type": "integer", "minimum": 1},
                "object_count": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "size_mm": _pair,
                "supersampling": {"type": "integer", "minimum": 4},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "n_per_center": {"type": "integer", "minimum": 1},
        "noise_std": {"type": "number", "minimum": 0},
        "centers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {
                    "name": {"type": "string"},
                    "spacing_mm": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                    "background": {"type": "number"},
                    "object": {"type": "number"},
                    "noise_std": {"type": "number"},
                    "contrast_scale": {"type": "number"},
                },
            },
        },
    },
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 so that 2 stays reserved for non-convergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def output_root(path) -> Path:
    path = Path(path)
    if path.is_absolute():
        return path
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / path if root else path


def _read_yaml(path):
    try:
        return yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise CliError(f"{path}: not valid YAML ({exc})") from None


def phantom_setup(raw: dict):
    """(PhantomSpec, centers, n_per_center) from a parsed phantom spec document."""
    try:
        jsonschema.validate(raw, PHANTOM_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"phantom spec error at {where}: {exc.message}") from None
    p = dict(raw.get("phantom", {}))
    for key in ("object_count", "size_mm"):
        if key in p:
            p[key] = tuple(p[key])
    spec = PhantomSpec(**p)
    if "centers" in raw:
        centers = [CenterProfile(**{**c, **({"spacing_mm": tuple(c["spacing_mm"])} if "spacing_mm" in c else {})}) for c in raw["centers"]]
    else:
        centers = default_centers(raw.get("noise_std", 3.0))
    return spec, centers, int(raw.get("n_per_center", 10))


def cmd_generate(args):
    spec, centers, n = phantom_setup(_read_yaml(args.spec))
    subjects = gen_dataset(spec, centers, n)
    out = output_root(args.out)
    manifest = write_dataset(subjects, out, extra_meta={**spec_to_dict(spec, centers), "n_per_center": n})
    print(f"wrote {len(subjects)} subjects to {manifest}")
    return EXIT_OK


def _config(path):
    cfg = load_config(path)
    return cfg, output_root(cfg.effective["output_dir"])


def cmd_train(args):
    if args.candidate not in CANDIDATE_NAMES:
        raise CliError(f"unknown candidate {args.candidate!r}; choose one of: {', '.join(CANDIDATE_NAMES)}")
    cfg, out = _config(args.config)
    run_dir = out / RUNS_DIR / run_dir_name(args.iteration, args.candidate)
    hist = train_run(cfg, args.candidate, args.iteration, run_dir)
    print(f"{run_dir}: {hist.stop_reason} after {hist.stop_epoch} epochs, best epoch {hist.best_epoch}")
    if not hist.converged:
        print(f"not converged: {hist.diagnostic}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_evaluate(args):
    rows = evaluate_run(Path(args.run), split_name=args.split)
    print(f"{args.run}: evaluated {len(rows)} {args.split} subjects")
    return EXIT_OK


def cmd_experiment(args):
    cfg, out = _config(args.plan)
    run_experiment(ExperimentPlan(cfg), out, resume=args.resume, jobs=args.jobs)
    print(f"results in {out}")
    return EXIT_OK


def cmd_report(args):
    paths = report(Path(args.results), out_dir=args.out, svg=args.svg, lesions=True if args.lesions else None)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="softseg", description="Soft-label segmentation training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantoms", parents=[common], help="write a synthetic multi-center dataset")
    p.add_argument("--spec", required=True, help="phantom spec (YAML)")
    p.add_argument("--out", required=True, help="dataset directory (created if missing)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one candidate for one iteration")
    p.add_argument("--config", required=True)
    p.add_argument("--candidate", required=True, help=", ".join(CANDIDATE_NAMES))
    p.add_argument("--iteration", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="threshold sweep and test metrics for a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common], help="all candidates over all iterations")
    p.add_argument("--plan", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", parents=[common], help="summary tables and curves from a result store")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None, help="defaults to <results>/report")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--lesions", action="store_true", help="force the lesion-wise column set")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, SoftSegError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
