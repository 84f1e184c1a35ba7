"""
Differentiable building blocks for the 2D U-Net.

Every layer caches what it needs during ``forward`` and consumes that cache in
``backward``. Activations travel as plain numpy arrays in NHWC layout; only
trainable parameters are wrapped in :class:`Tensor` so they can carry a
gradient.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError, StateError


def _channel_sum(a):
    """Sum over every axis but the last; a ones-vector matmul is far faster
    than ``a.sum(axis=(0, 1, 2))`` when the channel count is small."""
    flat = a.reshape(-1, a.shape[-1])
    return np.ones(flat.shape[0], dtype=a.dtype) @ flat


class Tensor:
    """A dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        if grad is not None and np.shape(grad) != self.data.shape:
            raise ShapeError(f"grad shape {np.shape(grad)} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Layer:
    """Base class: named parameters, named buffers, forward/backward."""

    def __init__(self):
        self._cache = None

    def parameters(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def astype(self, dtype):
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for name, buf in self.buffers().items():
            setattr(self, name, buf.astype(dtype))
        return self


class Conv2d(Layer):
    """kxk convolution (k in {1, 3}) with zero padding that preserves H and W.

    The 3x3 case is computed as nine matmuls over row-shifted views of the
    flattened padded input, which avoids materialising an im2col matrix.
    Weights are stored as (k, k, in_channels, out_channels).
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, rng=None, dtype=np.float32):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ValueError("kernel_size must be 1 or 3")
        self.k = kernel_size
        self.pad = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        bound = math.sqrt(6.0 / fan_in)  # kaiming-uniform, gain sqrt(2)
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.uniform(-bound, bound, size=(kernel_size, kernel_size, in_channels, out_channels))
        self.weight = Tensor(w.astype(dtype))
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training=False, rng=None):
        n, h, w, c = x.shape
        wt = self.weight.data
        if c != wt.shape[2]:
            raise ShapeError(f"conv expects {wt.shape[2]} input channels, got {c}")
        if self.k == 1:
            xf = x.reshape(-1, c)
            out = xf @ wt[0, 0] + self.bias.data
            self._cache = (xf, x.shape)
            return out.reshape(n, h, w, -1)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        wp = w + 2
        xf = xp.reshape(-1, c)
        valid = xf.shape[0] - 2 * wp - 2
        acc = np.empty((xf.shape[0], wt.shape[3]), dtype=x.dtype)
        acc[valid:] = 0
        body = acc[:valid]
        body[...] = xf[0:valid] @ wt[0, 0]
        for i in range(3):
            for j in range(3):
                if i == 0 and j == 0:
                    continue
                off = i * wp + j
                body += xf[off:off + valid] @ wt[i, j]
        out = acc.reshape(n, h + 2, wp, -1)[:, :h, :w]
        out = out + self.bias.data
        self._cache = (xf, x.shape)
        return out

    def backward(self, grad):
        xf, xshape = self._pop_cache()
        n, h, w, c = xshape
        wt = self.weight.data
        co = wt.shape[3]
        self.bias.grad = _channel_sum(grad)
        if self.k == 1:
            gf = grad.reshape(-1, co)
            self.weight.grad = (xf.T @ gf)[None, None]
            return (gf @ wt[0, 0].T).reshape(xshape)
        wp = w + 2
        gfull = np.zeros((n, h + 2, wp, co), dtype=grad.dtype)
        gfull[:, :h, :w] = grad
        gf = gfull.reshape(-1, co)
        valid = gf.shape[0] - 2 * wp - 2
        gf = gf[:valid]
        dw = np.empty_like(wt)
        dxf = np.zeros_like(xf)
        for i in range(3):
            for j in range(3):
                off = i * wp + j
                dw[i, j] = xf[off:off + valid].T @ gf
                dxf[off:off + valid] += gf @ wt[i, j].T
        self.weight.grad = dw
        return dxf.reshape(n, h + 2, wp, c)[:, 1:h + 1, 1:w + 1]


class BatchNorm2d(Layer):
    """Per-channel batch normalisation over (N, H, W)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False, rng=None):
        if training:
            m = x.shape[0] * x.shape[1] * x.shape[2]
            mean = _channel_sum(x) / m
            centered = x - mean
            var = _channel_sum(centered * centered) / m
            unbiased = var * (m / max(m - 1, 1))
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(x.dtype)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
            centered = x - mean
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = centered * inv_std
        self._cache = (xhat, inv_std, training)
        return xhat * self.gamma.data + self.beta.data

    def backward(self, grad):
        xhat, inv_std, training = self._pop_cache()
        self.gamma.grad = _channel_sum(grad * xhat)
        self.beta.grad = _channel_sum(grad)
        gxhat = grad * self.gamma.data
        if not training:
            return gxhat * inv_std
        m = grad.shape[0] * grad.shape[1] * grad.shape[2]
        s1 = _channel_sum(gxhat)
        s2 = _channel_sum(gxhat * xhat)
        return (inv_std / m) * (m * gxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, training=False, rng=None):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._pop_cache()


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate <= 1.0:
            raise ValueError("dropout rate must lie in [0, 1]")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._cache = 1.0
            return x
        if rng is None:
            raise StateError("dropout in training mode needs an rng")
        if self.rate == 1.0:
            scale = np.zeros(x.shape, dtype=x.dtype)
        else:
            keep = rng.random(x.shape, dtype=np.float32) >= self.rate
            scale = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.rate))
        self._cache = scale
        return x * scale

    def backward(self, grad):
        return grad * self._pop_cache()


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; gradient routes to the first maximum."""

    def forward(self, x, training=False, rng=None):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
        a, b = x[:, 0::2, 0::2], x[:, 0::2, 1::2]
        cc, d = x[:, 1::2, 0::2], x[:, 1::2, 1::2]
        out = np.maximum(np.maximum(a, b), np.maximum(cc, d))
        ma = a == out
        mb = (b == out) & ~ma
        mc = (cc == out) & ~(ma | mb)
        md = ~(ma | mb | mc)
        self._cache = (ma, mb, mc, md, x.shape)
        return out

    def backward(self, grad):
        ma, mb, mc, md, shape = self._pop_cache()
        dx = np.empty(shape, dtype=grad.dtype)
        dx[:, 0::2, 0::2] = grad * ma
        dx[:, 0::2, 1::2] = grad * mb
        dx[:, 1::2, 0::2] = grad * mc
        dx[:, 1::2, 1::2] = grad * md
        return dx


class Upsample2x(Layer):
    """Nearest-neighbour 2x spatial upsampling."""

    def forward(self, x, training=False, rng=None):
        self._cache = True
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad):
        self._pop_cache()
        n, h, w, c = grad.shape
        return grad.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class ConvBlock(Layer):
    """conv -> batch-norm -> ReLU -> dropout."""

    def __init__(self, in_channels, out_channels, dropout_rate, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self.relu = ReLU()
        self.drop = Dropout(dropout_rate)
        self._seq = (self.conv, self.bn, self.relu, self.drop)

    def parameters(self):
        out = {}
        for name in ("conv", "bn"):
            for k, v in getattr(self, name).parameters().items():
                out[f"{name}.{k}"] = v
        return out

    def buffers(self):
        return {f"bn.{k}": v for k, v in self.bn.buffers().items()}

    def astype(self, dtype):
        self.conv.astype(dtype)
        self.bn.astype(dtype)
        return self

    def forward(self, x, training=False, rng=None):
        for layer in self._seq:
            x = layer.forward(x, training, rng)
        return x

    def backward(self, grad):
        for layer in reversed(self._seq):
            grad = layer.backward(grad)
        return grad
