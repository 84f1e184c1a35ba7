"""
Synthetic multi-center phantoms with exact partial-volume ground truth.

Shapes are rasterised on a grid ``k`` times finer than the output in-plane;
each output voxel's soft label is the mean of its k x k sub-samples, i.e. the
fraction of the voxel area covered by the object. Images are the
two-tissue mixture of those fractions plus Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .volio import SoftMask, Subject, Volume, save_volume

MAX_RETRIES = 20


class Task(str, Enum):
    SINGLE_BLOB = "SingleBlob"
    MULTI_LESION = "MultiLesion"


@dataclass(frozen=True)
class CenterProfile:
    name: str
    spacing_mm: tuple = (0.5, 0.5, 2.0)
    background: float = 100.0
    object: float = 160.0
    noise_std: float = 5.0
    contrast_scale: float = 1.0

    def __post_init__(self):
        if any(not s > 0 for s in self.spacing_mm):
            raise ConfigurationError(f"center {self.name}: spacing must be > 0")
        if self.noise_std < 0:
            raise ConfigurationError(f"center {self.name}: noise_std must be >= 0")


@dataclass(frozen=True)
class PhantomSpec:
    task: Task = Task.SINGLE_BLOB
    field_of_view_mm: float = 32.0
    n_slices: int = 3
    object_count: tuple = (1, 1)
    size_mm: tuple = (5.0, 9.0)
    supersampling: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if int(self.supersampling) != self.supersampling or self.supersampling < 4:
            raise ConfigurationError(f"supersampling must be an integer >= 4, got {self.supersampling}")
        lo, hi = self.size_mm
        if not 0 < lo <= hi:
            raise ConfigurationError(f"size range must be positive and ordered, got {self.size_mm}")
        clo, chi = self.object_count
        if not 1 <= clo <= chi:
            raise ConfigurationError(f"object count range invalid: {self.object_count}")
        if self.n_slices < 1:
            raise ConfigurationError("n_slices must be >= 1")


@dataclass
class Ellipse:
    """Centre (mm), semi-axes (mm), rotation (rad), and the slice range it spans."""

    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0
    z0: int = 0
    z1: int = 0  # inclusive
    taper: float = 0.0  # fractional shrink per slice away from the middle

    def semi_axes(self, z):
        mid = 0.5 * (self.z0 + self.z1)
        f = max(0.0, 1.0 - self.taper * abs(z - mid))
        return self.a * f, self.b * f


@dataclass
class Phantom:
    subject: Subject
    shapes: list = field(default_factory=list)


def _fine_centres(n, spacing, k):
    """Physical positions of the k sub-sample centres inside each of n voxels.

    Voxel i covers [(i - 1/2) s, (i + 1/2) s] (origin-aligned voxel centres).
    """
    j = np.arange(n * k)
    return ((j + 0.5) / k - 0.5) * spacing


def rasterize_ellipse(xs, ys, e: Ellipse, z):
    a, b = e.semi_axes(z)
    if a <= 0 or b <= 0:
        return np.zeros((xs.size, ys.size), dtype=bool)
    c, s = np.cos(e.angle), np.sin(e.angle)
    dx = xs[:, None] - e.cx
    dy = ys[None, :] - e.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def box_average(fine, k):
    nx, ny = fine.shape[0] // k, fine.shape[1] // k
    return fine.reshape(nx, k, ny, k).mean(axis=(1, 3))


def soft_fraction(shapes, dims, spacing, k):
    """Exact-to-1/k^2 area fraction of the union of ``shapes`` per voxel."""
    nx, ny, nz = dims
    xs = _fine_centres(nx, spacing[0], k)
    ys = _fine_centres(ny, spacing[1], k)
    out = np.zeros(dims, dtype=np.float64)
    for z in range(nz):
        fine = np.zeros((nx * k, ny * k), dtype=bool)
        for e in shapes:
            if e.z0 <= z <= e.z1:
                fine |= rasterize_ellipse(xs, ys, e, z)
        out[:, :, z] = box_average(fine.astype(np.float64), k)
    return out


def _sample_shapes(spec: PhantomSpec, rng, nz):
    fov = spec.field_of_view_mm
    lo, hi = spec.size_mm
    count = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    shapes = []
    if spec.task is Task.SINGLE_BLOB:
        for _ in range(count):
            a = rng.uniform(lo, hi) / 2
            b = rng.uniform(lo, hi) / 2
            cx = fov / 2 + rng.uniform(-0.1, 0.1) * fov
            cy = fov / 2 + rng.uniform(-0.1, 0.1) * fov
            shapes.append(Ellipse(cx, cy, a, b, rng.uniform(0, np.pi), 0, nz - 1, taper=rng.uniform(0.0, 0.15)))
    else:
        margin = hi
        for _ in range(count):
            d = rng.uniform(lo, hi)
            a = d / 2
            b = a * rng.uniform(0.6, 1.0)
            cx = rng.uniform(margin, fov - margin)
            cy = rng.uniform(margin, fov - margin)
            z0 = int(rng.integers(0, nz))
            z1 = int(min(nz - 1, z0 + rng.integers(0, 2)))
            shapes.append(Ellipse(cx, cy, a, b, rng.uniform(0, np.pi), z0, z1))
    return shapes


def gen_subject(spec: PhantomSpec, center: CenterProfile, seed, subject_id=None) -> Phantom:
    """Generate one subject on ``center``'s native grid, deterministically in ``seed``."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = center.spacing_mm
    nx = max(1, int(round(spec.field_of_view_mm / sx)))
    ny = max(1, int(round(spec.field_of_view_mm / sy)))
    nz = spec.n_slices
    k = spec.supersampling
    for _ in range(MAX_RETRIES):
        shapes = _sample_shapes(spec, rng, nz)
        soft = soft_fraction(shapes, (nx, ny, nz), (sx, sy), k)
        per_shape_ok = all(soft_fraction([e], (nx, ny, nz), (sx, sy), k).max() >= 0.5 for e in shapes)
        if soft.max() > 0 and per_shape_ok:
            break
    else:
        raise ConfigurationError(f"could not place visible objects after {MAX_RETRIES} attempts")

    bg = center.background * center.contrast_scale
    fg = center.object * center.contrast_scale
    image = bg + (fg - bg) * soft
    if center.noise_std > 0:
        image = image + rng.normal(0.0, center.noise_std, size=image.shape)
    sid = subject_id or f"{center.name}-{seed}"
    subj = Subject(
        id=sid,
        images=[Volume(image.astype(np.float32), (sx, sy, sz), contrast_id="T2s")],
        gt=SoftMask(soft.astype(np.float32), (sx, sy, sz)),
        center_id=center.name,
    )
    return Phantom(subj, shapes)


def subject_seed(base_seed, center_index, subject_index):
    """Independent per-subject seed derived from a counter tuple."""
    ss = np.random.SeedSequence([int(base_seed), int(center_index), int(subject_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def gen_dataset(spec: PhantomSpec, centers, n_per_center) -> list:
    if n_per_center < 1:
        raise ConfigurationError("n_per_center must be >= 1")
    subjects = []
    for ci, center in enumerate(centers):
        for si in range(n_per_center):
            seed = subject_seed(spec.seed, ci, si)
            subjects.append(gen_subject(spec, center, seed, subject_id=f"{center.name}_sub{si:03d}").subject)
    return subjects


def default_centers(noise_std=3.0):
    """Four synthetic acquisition sites differing in resolution, contrast and noise.

    One fine site and three coarser ones (in-plane ratio 1 : 1.2 : 2 : 2).
    """
    return [
        CenterProfile("c1", (0.5, 0.5, 2.0), 100.0, 150.0, noise_std, 1.0),
        CenterProfile("c2", (0.6, 0.6, 2.0), 80.0, 140.0, noise_std * 1.2, 1.1),
        CenterProfile("c3", (1.0, 1.0, 2.0), 120.0, 170.0, noise_std * 0.8, 0.9),
        CenterProfile("c4", (1.0, 1.0, 2.0), 90.0, 160.0, noise_std, 1.0),
    ]


# -- dataset files -------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def write_dataset(subjects, out_dir, extra_meta=None):
    """Write every subject in the volume container format plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ["subject\tcenter\timages\tgt"]
    for s in subjects:
        img_paths = []
        for i, img in enumerate(s.images):
            rel = f"{s.id}/image{i}"
            save_volume(img, out_dir / rel)
            img_paths.append(rel)
        save_volume(s.gt, out_dir / f"{s.id}/gt")
        rows.append(f"{s.id}\t{s.center_id}\t{','.join(img_paths)}\t{s.id}/gt")
    (out_dir / MANIFEST_NAME).write_text("\n".join(rows) + "\n", encoding="utf-8")
    if extra_meta is not None:
        (out_dir / "phantom.json").write_text(json.dumps(extra_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir / MANIFEST_NAME


def read_dataset(manifest_path) -> list:
    from .volio import load_volume

    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    root = manifest_path.parent
    subjects = []
    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        sid, center, imgs, gt = line.split("\t")
        images = [load_volume(root / p) for p in imgs.split(",")]
        g = load_volume(root / gt)
        subjects.append(Subject(sid, images, SoftMask(g.data, g.spacing_mm, g.orientation), center))
    return subjects


def spec_to_dict(spec: PhantomSpec, centers) -> dict:
    d = asdict(spec)
    d["task"] = spec.task.value
    return {"phantom": d, "centers": [asdict(c) for c in centers]}
