"""Random affine augmentation of 2D samples and the hard/soft mask switch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AffineRanges:
    rotation_deg: float = 20.0
    translate_frac: float = 0.03
    scale_frac: float = 0.10


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    translate_frac: tuple = (0.0, 0.0)
    scale_frac: float = 0.0

    @property
    def is_identity(self):
        return self.rotation_deg == 0.0 and self.scale_frac == 0.0 and not any(self.translate_frac)


def sample_affine(rng, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    """Draw rotation, per-axis translation and isotropic scale uniformly."""
    rot = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
    tx = rng.uniform(-ranges.translate_frac, ranges.translate_frac)
    ty = rng.uniform(-ranges.translate_frac, ranges.translate_frac)
    sc = rng.uniform(-ranges.scale_frac, ranges.scale_frac)
    return AffineParams(float(rot), (float(tx), float(ty)), float(sc))


def _inverse_map(shape, p: AffineParams):
    """Matrix/offset mapping output coords to input coords (scipy convention)."""
    theta = np.deg2rad(p.rotation_deg)
    s = 1.0 + p.scale_frac
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    forward = s * rot
    inv = np.linalg.inv(forward)
    centre = (np.array(shape[:2], dtype=np.float64) - 1.0) / 2.0
    shift = np.array(p.translate_frac) * np.array(shape[:2])
    # out = A (in - c) + c + t  =>  in = A^-1 (out - c - t) + c
    offset = centre - inv @ (centre + shift)
    return inv, offset


def apply_affine(sample, p: AffineParams, is_mask=False):
    """Warp a 2D array (or a (C, H, W) stack) with bilinear interpolation.

    Rotation and scaling act about the slice centre; out-of-bounds samples are
    0. Masks are clamped to [0, 1].
    """
    arr = np.asarray(sample)
    if p.is_identity:
        return arr.copy()
    if arr.ndim == 3:
        return np.stack([apply_affine(a, p, is_mask) for a in arr])
    inv, offset = _inverse_map(arr.shape, p)
    out = ndimage.affine_transform(
        arr.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0, prefilter=False
    )
    if is_mask:
        np.clip(out, 0.0, 1.0, out=out)
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def augment_pair(image, mask, p: AffineParams):
    """Apply one shared transform to an image stack and its mask."""
    return apply_affine(image, p), apply_affine(mask, p, is_mask=True)


def finalize_mask(mask, hard: bool):
    """Binarise at 0.5 (ties go to 1) for hard candidates; identity otherwise."""
    mask = np.asarray(mask)
    if not hard:
        return mask
    return (mask >= 0.5).astype(mask.dtype if mask.dtype.kind == "f" else np.float32)
