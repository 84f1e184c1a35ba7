"""
Run configuration: a YAML document validated against a JSON schema.

Defaults describe the spinal-cord grey-matter protocol. Unknown keys are
rejected at every level. ``effective`` is the fully merged dictionary that
gets written into run metadata; loading it back reproduces the run.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import yaml

from .augment import AffineRanges
from .candidates import CANDIDATE_NAMES
from .errors import ConfigurationError
from .nn import UNetConfig
from .objective import AWingParams
from .trainer import TrainConfig

DEFAULTS = {
    "dataset": None,
    "output_dir": "results",
    "seed": 0,
    "preprocessing": {"resample_mm": [0.25, 0.25, 2.0], "orientation": "RPI", "crop": [128, 128]},
    "augmentation": {"rotation_deg": 20.0, "translation_frac": 0.03, "scale_frac": 0.10},
    "model": {"depth": 3, "base_filters": 16, "dropout": 0.3},
    "training": {
        "batch_size": 8,
        "lr0": 0.001,
        "scheduler": "cosine",
        "max_epochs": 200,
        "early_stopping": {"patience": 50, "min_delta": 0.001},
    },
    "adaptive_wing": {"epsilon": 1.0, "alpha": 2.1, "theta": 0.5, "omega": 8.0},
    "experiment": {
        "scheme": "CenterWise",
        "iterations": 40,
        "candidates": list(CANDIDATE_NAMES),
    },
    "evaluation": {"lesion_metrics": False, "lesion_min_overlap_voxels": 1},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj(
    {
        "dataset": {"type": ["string", "null"]},
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "preprocessing": _obj(
            {
                "resample_mm": {"type": "array", "items": {"anyOf": [_pos, {"type": "null"}]}, "minItems": 3, "maxItems": 3},
                "orientation": {"type": "string", "enum": ["RPI"]},
                "crop": {"type": "array", "items": _posint, "minItems": 2, "maxItems": 2},
            }
        ),
        "augmentation": _obj(
            {
                "rotation_deg": {"type": "number", "minimum": 0},
                "translation_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "scale_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            }
        ),
        "model": _obj(
            {
                "depth": _posint,
                "base_filters": _posint,
                "dropout": {"type": "number", "minimum": 0, "maximum": 1},
            }
        ),
        "training": _obj(
            {
                "batch_size": _posint,
                "lr0": {"type": "number", "minimum": 0},
                "scheduler": {"type": "string", "enum": ["cosine"]},
                "max_epochs": _posint,
                "early_stopping": _obj({"patience": {"type": "integer", "minimum": 0}, "min_delta": {"type": "number", "minimum": 0}}),
            }
        ),
        "adaptive_wing": _obj({"epsilon": _pos, "alpha": {"type": "number", "exclusiveMinimum": 1}, "theta": _pos, "omega": _pos}),
        "experiment": _obj(
            {
                "scheme": {"type": "string", "enum": ["CenterWise", "PatientWise"]},
                "iterations": _posint,
                "candidates": {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True},
            }
        ),
        "evaluation": _obj({"lesion_metrics": {"type": "boolean"}, "lesion_min_overlap_voxels": _posint}),
    }
)


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    effective: dict

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir=None) -> "RunConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration must be a mapping at the top level")
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigurationError(f"config error at {where}: {exc.message}") from None
        eff = _merge(DEFAULTS, raw)
        if base_dir is not None and eff["dataset"] and not Path(eff["dataset"]).is_absolute():
            eff["dataset"] = str((Path(base_dir) / eff["dataset"]).resolve())
        for name in eff["experiment"]["candidates"]:
            if name not in CANDIDATE_NAMES:
                raise ConfigurationError(f"unknown candidate {name!r}; choose from {', '.join(CANDIDATE_NAMES)}")
        cfg = cls(eff)
        cfg.train_config().validate()
        return cfg

    @property
    def dataset(self):
        return self.effective["dataset"]

    @property
    def seed(self) -> int:
        return int(self.effective["seed"])

    @property
    def candidates(self) -> list:
        return list(self.effective["experiment"]["candidates"])

    def awing(self) -> AWingParams:
        return AWingParams(**self.effective["adaptive_wing"])

    def train_config(self, seed=None) -> TrainConfig:
        e = self.effective
        t, m, a, p = e["training"], e["model"], e["augmentation"], e["preprocessing"]
        return TrainConfig(
            batch_size=t["batch_size"],
            max_epochs=t["max_epochs"],
            patience=t["early_stopping"]["patience"],
            min_improvement=t["early_stopping"]["min_delta"],
            lr0=t["lr0"],
            unet=UNetConfig(depth=m["depth"], in_channels=1, base_filters=m["base_filters"], dropout_rate=m["dropout"]),
            crop=tuple(p["crop"]),
            target_spacing=tuple(p["resample_mm"]),
            augmentation=AffineRanges(a["rotation_deg"], a["translation_frac"], a["scale_frac"]),
            seed=self.seed if seed is None else int(seed),
        )

    def digest(self) -> str:
        blob = json.dumps(self.effective, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.effective, sort_keys=True)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    return RunConfig.from_dict(raw, base_dir=path.parent)
