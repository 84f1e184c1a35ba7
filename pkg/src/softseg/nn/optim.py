"""Adam optimiser and cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, NumericError, ShapeError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0


def adam_step(state: OptimState, params: dict, grads: dict, lr: float):
    """Apply one Adam update in place to ``params`` (name -> Tensor or ndarray).

    Raises NumericError before touching anything if a gradient is not finite.
    """
    for name, g in grads.items():
        if g is None:
            raise NumericError(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    state.lr = float(lr)
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        data = p if isinstance(p, np.ndarray) else p.data
        g = grads[name]
        if g.shape != data.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        if lr == 0.0:
            continue
        step = (lr / c1) * m / (np.sqrt(v / c2) + EPS)
        data -= step.astype(data.dtype, copy=False)
    return params


def cosine_annealing_lr(epoch: int, lr0: float, t_max: int, lr_min: float = 0.0) -> float:
    if t_max < 1:
        raise ConfigurationError(f"t_max must be >= 1, got {t_max}")
    if not 0 <= epoch <= t_max:
        raise ConfigurationError(f"epoch {epoch} outside [0, {t_max}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / t_max))
