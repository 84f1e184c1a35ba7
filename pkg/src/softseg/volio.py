"""
Volume data model, on-disk container, resampling and the preprocessing chain.

Grids are origin-aligned: voxel 0 of every grid sits at the same physical
point, so output voxel ``i`` along an axis samples the input at continuous
index ``i * out_spacing / in_spacing``. Samples past the last input voxel
replicate the edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, ShapeError, StateError

CANONICAL_ORIENTATION = "RPI"


class Kind(str, Enum):
    IMAGE = "image"
    GROUND_TRUTH = "gt"


@dataclass
class Volume:
    """A 3D scalar grid with physical spacing; ``data`` has shape (nx, ny, nz)."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    orientation: str = CANONICAL_ORIENTATION
    contrast_id: str | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {data.shape}")
        self.data = data
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3:
            raise ValueError(f"spacing needs 3 components, got {self.spacing_mm}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing components must be > 0, got {self.spacing_mm}")

    @property
    def dims(self):
        return tuple(self.data.shape)

    def with_data(self, data, **changes):
        return replace(self, data=data, **changes)


class SoftMask(Volume):
    """A volume whose values are tissue fractions in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        self.data = np.clip(self.data, 0.0, 1.0)


@dataclass
class Subject:
    id: str
    images: list
    gt: SoftMask
    center_id: str = "0"

    def __post_init__(self):
        grid = (self.gt.dims, self.gt.spacing_mm)
        for img in self.images:
            if (img.dims, img.spacing_mm) != grid:
                raise ShapeError(f"subject {self.id}: image grid {img.dims}@{img.spacing_mm} != gt grid {grid}")

    @property
    def hard_gt(self) -> np.ndarray:
        return (self.gt.data >= 0.5).astype(np.float32)


# -- on-disk container ---------------------------------------------------------


def _header_paths(path):
    path = Path(path)
    if path.suffix in (".vol", ".volhdr"):
        path = path.with_suffix("")
    return path.with_suffix(".vol"), path.with_suffix(".volhdr")


def save_volume(volume: Volume, path):
    """Write ``<name>.vol`` (float32 LE, x fastest) and ``<name>.volhdr``."""
    raw_path, hdr_path = _header_paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "dims=" + " ".join(str(d) for d in volume.dims),
        "spacing_mm=" + " ".join(repr(float(s)) for s in volume.spacing_mm),
        f"orientation={volume.orientation}",
        f"contrast={volume.contrast_id or ''}",
        f"kind={'softmask' if isinstance(volume, SoftMask) else 'image'}",
    ]
    hdr_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    raw_path.write_bytes(np.asarray(volume.data, dtype="<f4").ravel(order="F").tobytes())
    return raw_path


def load_volume(path) -> Volume:
    raw_path, hdr_path = _header_paths(path)
    fields = {}
    for n, line in enumerate(hdr_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"line {n} is not key=value: {line!r}", field="header")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    for key in ("dims", "spacing_mm"):
        if key not in fields:
            raise FormatError("missing", field=key)
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
    except ValueError:
        raise FormatError(f"not integers: {fields['dims']!r}", field="dims") from None
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise FormatError(f"need three positive sizes, got {dims}", field="dims")
    try:
        spacing = tuple(float(v) for v in fields["spacing_mm"].split())
    except ValueError:
        raise FormatError(f"not numbers: {fields['spacing_mm']!r}", field="spacing_mm") from None
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise FormatError(f"components must be > 0, got {spacing}", field="spacing_mm")
    payload = raw_path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, dims need {expected}", field="payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    cls = SoftMask if fields.get("kind") == "softmask" else Volume
    return cls(
        data=data,
        spacing_mm=spacing,
        orientation=fields.get("orientation", CANONICAL_ORIENTATION),
        contrast_id=fields.get("contrast") or None,
    )


# -- resampling ----------------------------------------------------------------


def resampled_dims(dims, spacing, target_spacing):
    return tuple(max(1, int(round(d * s / t))) for d, s, t in zip(dims, spacing, target_spacing))


def resample_array(data, spacing, target_spacing, kind=Kind.IMAGE, out_shape=None):
    """Resample a 3D array between origin-aligned grids.

    Images use an interpolating quadratic B-spline (prefiltered); ground
    truths use trilinear interpolation followed by clamping to [0, 1].
    """
    kind = Kind(kind)
    data = np.asarray(data, dtype=np.float64)
    if out_shape is None:
        out_shape = resampled_dims(data.shape, spacing, target_spacing)
    out_shape = tuple(int(s) for s in out_shape)
    scale = np.array([t / s for s, t in zip(spacing, target_spacing)])
    if out_shape == data.shape and np.all(scale == 1.0):
        out = data.copy()
    else:
        order = 2 if kind is Kind.IMAGE else 1
        # degenerate axes: replicate by sampling index 0
        scale = np.where(np.array(data.shape) == 1, 0.0, scale)
        out = ndimage.affine_transform(
            data,
            np.diag(scale),
            offset=0.0,
            output_shape=out_shape,
            order=order,
            mode="nearest",
            prefilter=order > 1,
        )
    if kind is Kind.GROUND_TRUTH:
        np.clip(out, 0.0, 1.0, out=out)
    return out.astype(np.float32)


def resample(v: Volume, target_spacing_mm, kind=None, out_shape=None) -> Volume:
    if any(t is not None and not t > 0 for t in target_spacing_mm):
        raise ValueError(f"target spacing must be > 0, got {target_spacing_mm}")
    target = tuple(float(s if t is None else t) for s, t in zip(v.spacing_mm, target_spacing_mm))
    if kind is None:
        kind = Kind.GROUND_TRUTH if isinstance(v, SoftMask) else Kind.IMAGE
    data = resample_array(v.data, v.spacing_mm, target, kind, out_shape=out_shape)
    return v.with_data(data, spacing_mm=target)


# -- cropping ------------------------------------------------------------------


def crop_offsets(dims, size):
    """Start index per cropped axis; negative starts mean zero padding."""
    return tuple((d - s) // 2 for d, s in zip(dims, size))


def _window(data, offsets, size):
    out = np.zeros(tuple(size) + data.shape[len(size):], dtype=data.dtype)
    src, dst = [], []
    for start, s, d in zip(offsets, size, data.shape):
        lo, hi = max(start, 0), min(start + s, d)
        src.append(slice(lo, max(hi, lo)))
        dst.append(slice(lo - start, lo - start + max(hi - lo, 0)))
    out[tuple(dst)] = data[tuple(src)]
    return out


def center_crop_array(data, size):
    """Centre-crop the leading ``len(size)`` axes, zero-padding where smaller."""
    offsets = crop_offsets(data.shape, size)
    return _window(data, offsets, size), offsets


def uncrop_array(data, original_dims, offsets):
    """Re-embed a crop at ``offsets`` into a zero array of ``original_dims``."""
    k = len(offsets)
    out = np.zeros(tuple(original_dims[:k]) + data.shape[k:], dtype=data.dtype)
    src, dst = [], []
    for start, s, d in zip(offsets, data.shape, original_dims):
        lo, hi = max(start, 0), min(start + s, d)
        dst.append(slice(lo, max(hi, lo)))
        src.append(slice(lo - start, lo - start + max(hi - lo, 0)))
    out[tuple(dst)] = data[tuple(src)]
    return out


def center_crop(v: Volume, size) -> Volume:
    data, _ = center_crop_array(v.data, size)
    return v.with_data(data)


def uncrop(v: Volume, original_dims, offsets) -> Volume:
    return v.with_data(uncrop_array(v.data, original_dims, offsets))


# -- intensity normalisation ---------------------------------------------------


def zscore_array(data):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("image holds non-finite intensities")
    mean = data.mean()
    std = data.std()
    if not std > 1e-12 * max(1.0, abs(mean)):
        return np.zeros(data.shape, dtype=np.float32)
    return ((data - mean) / std).astype(np.float32)


def zscore_normalize(v: Volume) -> Volume:
    return v.with_data(zscore_array(v.data))


# -- slices --------------------------------------------------------------------


def slices(volume) -> list:
    """Axial (third-axis) decomposition, ordered by increasing z."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    return [data[:, :, k].copy() for k in range(data.shape[2])]


def reassemble(slice_list, like: Volume | None = None, expected=None):
    if expected is None and like is not None:
        expected = like.dims[2]
    if expected is not None and len(slice_list) != expected:
        raise ShapeError(f"got {len(slice_list)} slices, expected {expected}")
    shapes = {np.shape(s) for s in slice_list}
    if len(shapes) != 1:
        raise ShapeError(f"slices have mixed shapes {sorted(shapes)}")
    data = np.stack(slice_list, axis=2)
    return like.with_data(data) if like is not None else data


# -- preprocessing chain with provenance ----------------------------------------


@dataclass
class Provenance:
    """What it takes to map a processed-grid array back to the native grid."""

    native_dims: tuple
    native_spacing: tuple
    resampled_dims: tuple
    target_spacing: tuple
    crop_offsets: tuple
    crop_size: tuple


@dataclass
class Processed:
    subject_id: str
    images: np.ndarray  # (C, X, Y, Z)
    gt: np.ndarray  # (X, Y, Z), soft
    provenance: Provenance
    meta: dict = field(default_factory=dict)

    def slice_samples(self):
        """(image (C, X, Y), mask (X, Y)) per axial slice."""
        return [(self.images[:, :, :, k], self.gt[:, :, k]) for k in range(self.gt.shape[2])]


def preprocess(subject: Subject, target_spacing, crop_size) -> Processed:
    """Resample, z-score each contrast and centre-crop in-plane."""
    native = subject.gt
    target = tuple(float(s if t is None else t) for s, t in zip(native.spacing_mm, target_spacing))
    rdims = resampled_dims(native.dims, native.spacing_mm, target)
    crop_size = tuple(crop_size)
    images = []
    for img in subject.images:
        r = resample_array(img.data, img.spacing_mm, target, Kind.IMAGE, out_shape=rdims)
        r = zscore_array(r)
        images.append(center_crop_array(r, crop_size)[0])
    gt = resample_array(native.data, native.spacing_mm, target, Kind.GROUND_TRUTH, out_shape=rdims)
    gt, offsets = center_crop_array(gt, crop_size)
    prov = Provenance(
        native_dims=native.dims,
        native_spacing=native.spacing_mm,
        resampled_dims=rdims,
        target_spacing=target,
        crop_offsets=offsets,
        crop_size=crop_size,
    )
    return Processed(subject.id, np.stack(images, axis=0), gt, prov)


def to_native(prediction, subject_or_provenance) -> SoftMask:
    """Undo the crop (zero fill) and the resampling (linear) of a prediction."""
    prov = subject_or_provenance
    if isinstance(prov, Processed):
        prov = prov.provenance
    if not isinstance(prov, Provenance):
        raise StateError("to_native needs the preprocessing provenance of the subject")
    data = prediction.data if isinstance(prediction, Volume) else np.asarray(prediction)
    full = uncrop_array(data.astype(np.float32), prov.resampled_dims, prov.crop_offsets)
    native = resample_array(full, prov.target_spacing, prov.native_spacing, Kind.GROUND_TRUTH, out_shape=prov.native_dims)
    return SoftMask(data=native, spacing_mm=prov.native_spacing)
