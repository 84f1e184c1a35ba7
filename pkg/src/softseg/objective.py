"""
Final activations and losses, each with an analytic gradient.

Arrays are batches shaped [N, ...]; every reduction is per sample first,
then a mean over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError


class ActivationKind(str, Enum):
    SIGMOID = "Sigmoid"
    NORM_RELU = "NormReLU"


@dataclass(frozen=True)
class AWingParams:
    epsilon: float = 1.0
    alpha: float = 2.1
    theta: float = 0.5
    omega: float = 8.0

    def __post_init__(self):
        if not (self.epsilon > 0 and self.theta > 0 and self.omega > 0):
            raise ConfigurationError("epsilon, theta and omega must be positive")
        if not self.alpha > 1:
            raise ConfigurationError("alpha must exceed 1 so the exponent stays positive")


class LossName(str, Enum):
    DICE = "Dice"
    ADAPTIVE_WING = "AdaptiveWing"


@dataclass(frozen=True)
class LossKind:
    name: LossName
    awing: AWingParams = AWingParams()
    squared_denominator: bool = False

    @classmethod
    def dice(cls, squared_denominator=False):
        return cls(LossName.DICE, squared_denominator=squared_denominator)

    @classmethod
    def adaptive_wing(cls, params: AWingParams = AWingParams()):
        return cls(LossName.ADAPTIVE_WING, awing=params)


# -- activations -----------------------------------------------------------------


def _per_sample(x):
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)


def sigmoid_act(x):
    x = np.asarray(x)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x, grad_out):
    s = sigmoid_act(x)
    return grad_out * s * (1.0 - s)


def norm_relu(x):
    """ReLU divided by the per-sample maximum of the rectified map (0 if that max is 0).

    A 1D input is treated as a single sample.
    """
    x = np.asarray(x)
    flat = _per_sample(x)
    r = np.maximum(flat, 0)
    m = r.max(axis=1, keepdims=True)
    safe = np.where(m > 0, m, 1)
    out = np.where(m > 0, r / safe, 0)
    return out.reshape(x.shape).astype(np.result_type(x.dtype, np.float32), copy=False)


def norm_relu_grad(x, grad_out):
    """Vector-Jacobian product of :func:`norm_relu`; the max routes through its argmax."""
    x = np.asarray(x)
    flat = _per_sample(x)
    g = _per_sample(grad_out)
    r = np.maximum(flat, 0)
    idx = np.argmax(r, axis=1)
    rows = np.arange(flat.shape[0])
    m = r[rows, idx][:, None]
    alive = m[:, 0] > 0
    safe = np.where(m > 0, m, 1)
    gx = np.where(flat > 0, g / safe, 0)
    coupling = (g * r).sum(axis=1, keepdims=True) / (safe * safe)
    gx[rows[alive], idx[alive]] -= coupling[alive, 0]
    gx[~alive] = 0
    return gx.reshape(x.shape)


def activate(kind: ActivationKind, x):
    kind = ActivationKind(kind)
    return sigmoid_act(x) if kind is ActivationKind.SIGMOID else norm_relu(x)


def activation_grad(kind: ActivationKind, x, grad_out):
    kind = ActivationKind(kind)
    return sigmoid_grad(x, grad_out) if kind is ActivationKind.SIGMOID else norm_relu_grad(x, grad_out)


# -- losses ------------------------------------------------------------------------

DICE_SMOOTH = 1.0


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def dice_loss(pred, gt, smooth=DICE_SMOOTH, squared_denominator=False) -> float:
    """1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s), per sample, batch-averaged."""
    pred, gt = _check_pair(pred, gt)
    p, g = _per_sample(pred), _per_sample(gt)
    inter = (p * g).sum(axis=1)
    if squared_denominator:
        denom = (p * p).sum(axis=1) + (g * g).sum(axis=1) + smooth
    else:
        denom = p.sum(axis=1) + g.sum(axis=1) + smooth
    return float(np.mean(1.0 - (2.0 * inter + smooth) / denom))


def dice_loss_grad(pred, gt, smooth=DICE_SMOOTH, squared_denominator=False):
    pred, gt = _check_pair(pred, gt)
    p, g = _per_sample(pred), _per_sample(gt)
    n = p.shape[0]
    num = 2.0 * (p * g).sum(axis=1, keepdims=True) + smooth
    if squared_denominator:
        den = (p * p).sum(axis=1, keepdims=True) + (g * g).sum(axis=1, keepdims=True) + smooth
        dden = 2.0 * p
    else:
        den = p.sum(axis=1, keepdims=True) + g.sum(axis=1, keepdims=True) + smooth
        dden = 1.0
    grad = -(2.0 * g * den - num * dden) / (den * den) / n
    return grad.reshape(pred.shape)


def _awing_terms(d, gt, prm: AWingParams):
    e = prm.alpha - gt
    ratio = prm.theta / prm.epsilon
    re = ratio**e
    a = prm.omega * (1.0 / (1.0 + re)) * e * ratio ** (e - 1.0) / prm.epsilon
    c = prm.theta * a - prm.omega * np.log1p(re)
    return e, a, c


def adaptive_wing_elementwise(pred, gt, prm: AWingParams = AWingParams()):
    pred, gt = _check_pair(pred, gt)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise NumericError("adaptive wing loss received non-finite input")
    d = np.abs(gt - pred)
    e, a, c = _awing_terms(d, gt, prm)
    small = prm.omega * np.log1p((d / prm.epsilon) ** e)
    large = a * d - c
    return np.where(d < prm.theta, small, large)


def adaptive_wing_loss(pred, gt, prm: AWingParams = AWingParams()) -> float:
    """Voxel-mean Adaptive Wing loss (equal-size samples, so equal to batch mean of sample means)."""
    return float(adaptive_wing_elementwise(pred, gt, prm).mean())


def adaptive_wing_grad(pred, gt, prm: AWingParams = AWingParams()):
    pred, gt = _check_pair(pred, gt)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise NumericError("adaptive wing loss received non-finite input")
    diff = pred - gt
    d = np.abs(diff)
    e, a, _ = _awing_terms(d, gt, prm)
    u = d / prm.epsilon
    small = prm.omega * e * u ** (e - 1.0) / (prm.epsilon * (1.0 + u**e))
    dd = np.where(d < prm.theta, small, a)
    return dd * np.sign(diff) / pred.size


def loss_value(kind: LossKind, pred, gt) -> float:
    if kind.name is LossName.DICE:
        return dice_loss(pred, gt, squared_denominator=kind.squared_denominator)
    return adaptive_wing_loss(pred, gt, kind.awing)


def loss_gradient(kind: LossKind, pred, gt):
    if kind.name is LossName.DICE:
        return dice_loss_grad(pred, gt, squared_denominator=kind.squared_denominator)
    return adaptive_wing_grad(pred, gt, kind.awing)
