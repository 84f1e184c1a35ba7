"""2D U-Net assembled from the layers in :mod:`softseg.nn.layers`."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, FormatError, ShapeError, StateError
from .layers import Conv2d, ConvBlock, MaxPool2x2, Tensor, Upsample2x

CHECKPOINT_MAGIC = b"SSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    in_channels: int = 1
    base_filters: int = 16
    dropout_rate: float = 0.3

    def validate(self):
        if int(self.depth) != self.depth or self.depth < 1:
            raise ConfigurationError(f"depth must be an integer >= 1, got {self.depth}")
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_filters < 1:
            raise ConfigurationError(f"base_filters must be >= 1, got {self.base_filters}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1], got {self.dropout_rate}")
        return self


class UNet:
    """Encoder/decoder with skip connections and a 1x1 output head.

    The network returns raw logits: the final activation belongs to the
    training candidate, not to the model.
    """

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        f, p = config.base_filters, config.dropout_rate
        chans = [f * 2**i for i in range(config.depth + 1)]

        self.encoders = []
        cin = config.in_channels
        for d in range(config.depth):
            self.encoders.append((ConvBlock(cin, chans[d], p, rng, dtype), ConvBlock(chans[d], chans[d], p, rng, dtype)))
            cin = chans[d]
        self.pool = [MaxPool2x2() for _ in range(config.depth)]
        self.bottleneck = (ConvBlock(cin, chans[-1], p, rng, dtype), ConvBlock(chans[-1], chans[-1], p, rng, dtype))

        self.ups = []
        self.decoders = []
        for d in reversed(range(config.depth)):
            self.ups.append((Upsample2x(), ConvBlock(chans[d + 1], chans[d], p, rng, dtype)))
            self.decoders.append((ConvBlock(2 * chans[d], chans[d], p, rng, dtype), ConvBlock(chans[d], chans[d], p, rng, dtype)))
        self.head = Conv2d(chans[0], 1, kernel_size=1, rng=rng, dtype=dtype)

        self._forward_meta = None
        self.dropout_rng = np.random.default_rng([self.seed, 1])

    # -- bookkeeping -----------------------------------------------------

    def _named_layers(self):
        for d, (a, b) in enumerate(self.encoders):
            yield f"enc{d}.0", a
            yield f"enc{d}.1", b
        yield "mid.0", self.bottleneck[0]
        yield "mid.1", self.bottleneck[1]
        for i, ((_, up), (a, b)) in enumerate(zip(self.ups, self.decoders)):
            d = self.config.depth - 1 - i
            yield f"dec{d}.up", up
            yield f"dec{d}.0", a
            yield f"dec{d}.1", b
        yield "head", self.head

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, layer in self._named_layers():
            for name, t in layer.parameters().items():
                out[f"{prefix}.{name}"] = t
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self._named_layers():
            for name, b in layer.buffers().items():
                out[f"{prefix}.{name}"] = b
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state):
        params = self.parameters()
        bufs = self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise FormatError(f"missing entries {sorted(missing)}", field="arrays")
        for name, t in params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
        for prefix, layer in self._named_layers():
            for name in layer.buffers():
                arr = np.asarray(state[f"{prefix}.{name}"])
                target = layer.bn if hasattr(layer, "bn") else layer
                setattr(target, name.split(".")[-1], arr.astype(self.dtype, copy=True))

    @property
    def dtype(self):
        return self.head.weight.data.dtype

    def astype(self, dtype):
        for _, layer in self._named_layers():
            layer.astype(dtype)
        return self

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    # -- computation -----------------------------------------------------

    def forward(self, batch, training=False, rng=None):
        """Run a [N, C, H, W] batch through the network and return [N, 1, H, W] logits.

        Spatial dims that are not multiples of ``2**depth`` are reflect-padded
        on the bottom/right and the output is cropped back.
        """
        batch = np.asarray(batch)
        if batch.ndim != 4 or batch.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected batch [N, {self.config.in_channels}, H, W], got {batch.shape}")
        if training and rng is None:
            rng = self.dropout_rng
        n, _, h, w = batch.shape
        mult = 2**self.config.depth
        ph, pw = (-h) % mult, (-w) % mult
        x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=self.dtype)
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "edge"
            x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode=mode)

        skips = []
        for (a, b), pool in zip(self.encoders, self.pool):
            x = b.forward(a.forward(x, training, rng), training, rng)
            skips.append(x)
            x = pool.forward(x, training, rng)
        x = self.bottleneck[1].forward(self.bottleneck[0].forward(x, training, rng), training, rng)
        for (up, conv), (a, b), skip in zip(self.ups, self.decoders, reversed(skips)):
            x = conv.forward(up.forward(x, training, rng), training, rng)
            x = np.concatenate([x, skip], axis=-1)
            x = b.forward(a.forward(x, training, rng), training, rng)
        x = self.head.forward(x, training, rng)

        self._forward_meta = (h, w, x.shape)
        return np.ascontiguousarray(x[:, :h, :w].transpose(0, 3, 1, 2))

    __call__ = forward

    def backward(self, loss_grad):
        """Back-propagate d(loss)/d(logits) and store gradients on every parameter."""
        if self._forward_meta is None:
            raise StateError("backward called without a preceding forward")
        h, w, padded_shape = self._forward_meta
        self._forward_meta = None
        loss_grad = np.asarray(loss_grad, dtype=self.dtype)
        if loss_grad.shape != (padded_shape[0], 1, h, w):
            raise ShapeError(f"loss gradient shape {loss_grad.shape} does not match logits")
        g = np.zeros(padded_shape, dtype=self.dtype)
        g[:, :h, :w] = loss_grad.transpose(0, 2, 3, 1)

        g = self.head.backward(g)
        skip_grads = []
        for (up, conv), (a, b) in zip(reversed(self.ups), reversed(self.decoders)):
            g = a.backward(b.backward(g))
            c = g.shape[-1] // 2
            skip_grads.append(g[..., c:])
            g = up.backward(conv.backward(g[..., :c]))
        g = self.bottleneck[0].backward(self.bottleneck[1].backward(g))
        for (a, b), pool, sg in zip(reversed(self.encoders), reversed(self.pool), reversed(skip_grads)):
            g = pool.backward(g) + sg
            g = a.backward(b.backward(g))
        return {k: t.grad for k, t in self.parameters().items()}


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(config, seed=seed, dtype=dtype)


def forward(model: UNet, batch, training=False, rng=None):
    return model.forward(batch, training=training, rng=rng)


def backward(model: UNet, loss_grad):
    return model.backward(loss_grad)


# -- checkpoint container ------------------------------------------------
#
# layout: magic(8) | version u32 | header_len u32 | header JSON (utf-8) |
#         float32 LE arrays in header order

def save_checkpoint(model: UNet, path, extra=None):
    state = model.state_dict()
    names = sorted(state)
    header = {
        "config": asdict(model.config),
        "seed": model.seed,
        "arrays": [{"name": k, "shape": list(state[k].shape)} for k in names],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(state[k], dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> UNet:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic", field="magic")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", field="version")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    state = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"payload truncated at {entry['name']}", field="arrays")
        state[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(entry["shape"])
        offset = end
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes", field="arrays")
    model = UNet(UNetConfig(**header["config"]), seed=header["seed"])
    model.load_state_dict(state)
    return model


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic", field="magic")
    _, hlen = struct.unpack("<II", raw[8:16])
    return json.loads(raw[16:16 + hlen].decode("utf-8"))
