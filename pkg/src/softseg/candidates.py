"""The five training candidates of the ablation matrix."""

from __future__ import annotations

from dataclasses import dataclass

from .objective import ActivationKind, AWingParams, LossKind, LossName

SOFTSEG = "Soft-ReLU-Wing"
CONVENTIONAL = "Hard-Sig-Dice"


@dataclass(frozen=True)
class CandidateConfig:
    name: str
    binarize_after_aug: bool
    activation: ActivationKind
    loss: LossKind

    def fields(self):
        return (self.binarize_after_aug, self.activation, self.loss.name)


def canonical_candidates(awing: AWingParams = AWingParams()) -> list[CandidateConfig]:
    wing = LossKind.adaptive_wing(awing)
    dice = LossKind.dice()
    sig, relu = ActivationKind.SIGMOID, ActivationKind.NORM_RELU
    return [
        CandidateConfig("Hard-Sig-Dice", True, sig, dice),
        CandidateConfig("Hard-ReLU-Wing", True, relu, wing),
        CandidateConfig("Soft-Sig-Wing", False, sig, wing),
        CandidateConfig("Soft-ReLU-Dice", False, relu, dice),
        CandidateConfig("Soft-ReLU-Wing", False, relu, wing),
    ]


CANDIDATE_NAMES = tuple(c.name for c in canonical_candidates())


def get_candidate(name: str, awing: AWingParams = AWingParams()) -> CandidateConfig:
    for c in canonical_candidates(awing):
        if c.name == name:
            return c
    raise KeyError(f"unknown candidate {name!r}; choose one of: {', '.join(CANDIDATE_NAMES)}")


def candidate_to_dict(c: CandidateConfig) -> dict:
    return {
        "name": c.name,
        "binarize_after_aug": c.binarize_after_aug,
        "activation": c.activation.value,
        "loss": c.loss.name.value,
    }


__all__ = [
    "CANDIDATE_NAMES",
    "CONVENTIONAL",
    "SOFTSEG",
    "CandidateConfig",
    "LossName",
    "canonical_candidates",
    "candidate_to_dict",
    "get_candidate",
]
