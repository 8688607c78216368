"""Procedural shape/texture dataset with independently controllable factors.

Every sample is a 32x32 grayscale image: one of ten solid shapes filled with
one of ten procedural textures, on a flat gray background. Shape and texture
classes can be aligned, forced to disagree (cue conflict) or drawn
independently.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import ndimage

from .errors import InvalidLevel
from .sampling import SeedSpec

SIZE = 32
N_CLASSES = 10
FORMAT_VERSION = 1

SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "plus", "ring", "hbar", "ell", "tee", "cross")
TEXTURE_NAMES = (
    "stripes_vertical",
    "stripes_horizontal",
    "stripes_diagonal",
    "stripes_antidiagonal",
    "checker_2",
    "checker_4",
    "checker_8",
    "noise_fine",
    "noise_coarse",
    "dots",
)

LOW, HIGH = 0.2, 0.8
BACKGROUND = 0.5
BACKGROUND_JITTER = 0.02

# canonical shapes live in units of SHAPE_UNIT pixels around the image centre
SHAPE_UNIT = 10.0
MAX_SHIFT = 3.0
MAX_SCALE = 0.15
MAX_ROTATION = 15.0

Mode = Literal["aligned", "conflict", "independent"]
PairKind = Literal["same_shape", "same_texture", "random"]
DISTORTIONS = ("gaussian_noise", "uniform_noise", "low_pass", "high_pass", "contrast", "rotation")


@dataclass
class SynthSample:
    image: np.ndarray  # (32, 32, 1) float32
    shape_class: int
    texture_class: int
    mask: np.ndarray  # (32, 32) bool


@dataclass
class DatasetManifest:
    split: str
    count: int
    class_counts: list[int]
    mode: str
    seed: int
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "split": self.split,
            "count": self.count,
            "class_counts": list(self.class_counts),
            "mode": self.mode,
            "seed": self.seed,
            "format_version": self.format_version,
        }
        d.update(self.extra)
        return d


@dataclass
class Dataset:
    """Columnar storage for a split: images ``(N, H, W, C)``, labels, masks."""

    images: np.ndarray
    shape_class: np.ndarray
    texture_class: np.ndarray
    masks: np.ndarray
    manifest: DatasetManifest | None = None

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> SynthSample:
        return SynthSample(self.images[i], int(self.shape_class[i]), int(self.texture_class[i]), self.masks[i])

    @classmethod
    def from_samples(cls, samples: list[SynthSample], manifest: DatasetManifest | None = None) -> Dataset:
        return cls(
            images=np.stack([s.image for s in samples]).astype(np.float32),
            shape_class=np.array([s.shape_class for s in samples], dtype=np.int64),
            texture_class=np.array([s.texture_class for s in samples], dtype=np.int64),
            masks=np.stack([s.mask for s in samples]).astype(bool),
            manifest=manifest,
        )

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.shape_class[idx], self.texture_class[idx], self.masks[idx])


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


def _in_box(x, y, x0, x1, y0, y1):
    return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


def _in_triangle(x, y):
    # upward-pointing isoceles triangle, apex at y = -1.1, base at y = 0.9
    ax, ay, bx, by, cx, cy = 0.0, -1.1, -1.2, 0.9, 1.2, 0.9

    def side(px, py, qx, qy):
        return (qx - px) * (y - py) - (qy - py) * (x - px)

    d1 = side(ax, ay, bx, by)
    d2 = side(bx, by, cx, cy)
    d3 = side(cx, cy, ax, ay)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _canonical_shape(shape_class: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = np.hypot(x, y)
    if shape_class == 0:
        return r <= 0.95
    if shape_class == 1:
        return (np.abs(x) <= 0.8) & (np.abs(y) <= 0.8)
    if shape_class == 2:
        return _in_triangle(x, y)
    if shape_class == 3:
        return np.abs(x) + np.abs(y) <= 1.15
    if shape_class == 4:
        return _in_box(x, y, -0.35, 0.35, -1.05, 1.05) | _in_box(x, y, -1.05, 1.05, -0.35, 0.35)
    if shape_class == 5:
        return (r >= 0.55) & (r <= 1.05)
    if shape_class == 6:
        return (
            _in_box(x, y, -1.05, -0.45, -1.05, 1.05)
            | _in_box(x, y, 0.45, 1.05, -1.05, 1.05)
            | _in_box(x, y, -0.45, 0.45, -0.25, 0.25)
        )
    if shape_class == 7:
        return _in_box(x, y, -0.95, -0.25, -1.05, 1.05) | _in_box(x, y, -0.95, 0.95, 0.35, 1.05)
    if shape_class == 8:
        return _in_box(x, y, -1.0, 1.0, -1.05, -0.35) | _in_box(x, y, -0.35, 0.35, -0.35, 1.05)
    if shape_class == 9:
        inside = (np.abs(x) <= 1.0) & (np.abs(y) <= 1.0)
        return inside & ((np.abs(x - y) <= 0.42) | (np.abs(x + y) <= 0.42))
    raise ValueError(f"shape_class must be in [0, {N_CLASSES}), got {shape_class}")


def shape_mask(shape_class: int, dx: float = 0.0, dy: float = 0.0, scale: float = 1.0, angle: float = 0.0) -> np.ndarray:
    """Rasterise a shape at pixel centres after shift (px), scale and rotation (degrees)."""
    coords = np.arange(SIZE, dtype=np.float64) + 0.5
    py, px = np.meshgrid(coords, coords, indexing="ij")
    cx = SIZE / 2 + dx
    cy = SIZE / 2 + dy
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    ux = px - cx
    uy = py - cy
    # inverse rotation takes image coordinates back to the canonical frame
    x = (c * ux + s * uy) / (scale * SHAPE_UNIT)
    y = (-s * ux + c * uy) / (scale * SHAPE_UNIT)
    return _canonical_shape(shape_class, x, y)


def render_shape(shape_class: int, jitter_seed: SeedSpec | None = None) -> np.ndarray:
    """Binary 32x32 mask; ``jitter_seed=None`` renders the canonical, unjittered shape."""
    if not 0 <= shape_class < N_CLASSES:
        raise ValueError(f"shape_class must be in [0, {N_CLASSES}), got {shape_class}")
    if jitter_seed is None:
        return shape_mask(shape_class)
    rng = jitter_seed.rng()
    dx = rng.uniform(-MAX_SHIFT, MAX_SHIFT)
    dy = rng.uniform(-MAX_SHIFT, MAX_SHIFT)
    scale = 1.0 + rng.uniform(-MAX_SCALE, MAX_SCALE)
    angle = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
    return shape_mask(shape_class, dx, dy, scale, angle)


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------


def _binary(pattern: np.ndarray) -> np.ndarray:
    return np.where(pattern, HIGH, LOW).astype(np.float32)


def _value_noise(rng, cell: int) -> np.ndarray:
    n = SIZE // cell + 2
    lattice = np.random.Generator(np.random.PCG64(rng.next_u64())).random((n, n))
    t = np.arange(SIZE) / cell
    i = np.floor(t).astype(int)
    f = t - i
    f = f * f * (3.0 - 2.0 * f)
    iy, ix = np.meshgrid(i, i, indexing="ij")
    fy, fx = np.meshgrid(f, f, indexing="ij")
    top = lattice[iy, ix] * (1 - fx) + lattice[iy, ix + 1] * fx
    bottom = lattice[iy + 1, ix] * (1 - fx) + lattice[iy + 1, ix + 1] * fx
    return top * (1 - fy) + bottom * fy


def texture_pattern(texture_class: int, ox: int = 0, oy: int = 0, rng=None) -> np.ndarray:
    """Full-frame 32x32 texture with integer phase offset ``(ox, oy)``.

    Noise textures draw their lattice from ``rng`` instead of using the offset.
    """
    yy, xx = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    x = xx + ox
    y = yy + oy
    if texture_class == 0:
        return _binary((x // 4) % 2 == 1)
    if texture_class == 1:
        return _binary((y // 4) % 2 == 1)
    if texture_class == 2:
        return _binary(((x + y) // 3) % 2 == 1)
    if texture_class == 3:
        return _binary(((x - y) // 2) % 2 == 1)
    if texture_class in (4, 5, 6):
        k = {4: 2, 5: 4, 6: 8}[texture_class]
        return _binary(((x // k) + (y // k)) % 2 == 1)
    if texture_class in (7, 8):
        if rng is None:
            rng = SeedSpec(0, "texture-default").rng()
        field_ = _value_noise(rng, 1 if texture_class == 7 else 2)
        return _binary(field_ > np.median(field_))
    if texture_class == 9:
        px = (x % 8) - 3.5
        py = (y % 8) - 3.5
        return _binary(px * px + py * py <= 2.5**2)
    raise ValueError(f"texture_class must be in [0, {N_CLASSES}), got {texture_class}")


def render_texture(texture_class: int, phase_seed: SeedSpec | None = None) -> np.ndarray:
    """32x32x1 texture image; ``phase_seed=None`` gives zero phase."""
    if not 0 <= texture_class < N_CLASSES:
        raise ValueError(f"texture_class must be in [0, {N_CLASSES}), got {texture_class}")
    if phase_seed is None:
        return texture_pattern(texture_class)[..., None]
    rng = phase_seed.rng()
    ox = rng.randbelow(16)
    oy = rng.randbelow(16)
    return texture_pattern(texture_class, ox, oy, rng=rng)[..., None]


def compose_sample(shape_class: int, texture_class: int, seed: SeedSpec) -> SynthSample:
    mask = render_shape(shape_class, seed.child("shape"))
    texture = render_texture(texture_class, seed.child("texture"))[..., 0]
    # bulk pixel noise comes from numpy's PCG64 keyed on the counter-based seed
    noise = np.random.Generator(np.random.PCG64(seed.child("background").key())).random((SIZE, SIZE))
    background = BACKGROUND + BACKGROUND_JITTER * (2.0 * noise - 1.0)
    image = np.where(mask, texture, background).astype(np.float32)[..., None]
    return SynthSample(image=image, shape_class=shape_class, texture_class=texture_class, mask=mask)


# ---------------------------------------------------------------------------
# splits and probe sets
# ---------------------------------------------------------------------------


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("SHAPEFORGE_THREADS")
    n = requested if requested is not None else (int(cap) if cap else os.cpu_count() or 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    workers = worker_count(workers)
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _split_classes(mode: str, name: str, i: int, seed: int) -> tuple[int, int]:
    shape = i % N_CLASSES
    if mode == "aligned":
        return shape, shape
    rng = SeedSpec(seed, f"split:{name}:texture", i).rng()
    if mode == "conflict":
        r = rng.randbelow(N_CLASSES - 1)
        return shape, r if r < shape else r + 1
    if mode == "independent":
        return shape, rng.randbelow(N_CLASSES)
    raise ValueError(f"unknown split mode {mode!r}")


def generate_split(mode: Mode, n: int, seed: int, name: str | None = None, workers: int | None = None) -> Dataset:
    """Class-balanced split: sample ``i`` has shape class ``i mod 10``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    name = name or mode

    def make(i: int) -> SynthSample:
        shape, texture = _split_classes(mode, name, i, seed)
        return compose_sample(shape, texture, SeedSpec(seed, f"split:{name}", i))

    samples = parallel_map(make, range(n), workers)
    counts = np.bincount([s.shape_class for s in samples], minlength=N_CLASSES)
    manifest = DatasetManifest(split=name, count=n, class_counts=counts.tolist(), mode=mode, seed=seed)
    return Dataset.from_samples(samples, manifest)


def _pair_classes(kind: str, rng) -> tuple[tuple[int, int], tuple[int, int]]:
    def other(c):
        r = rng.randbelow(N_CLASSES - 1)
        return r if r < c else r + 1

    if kind == "same_shape":
        shape = rng.randbelow(N_CLASSES)
        ta = rng.randbelow(N_CLASSES)
        return (shape, ta), (shape, other(ta))
    if kind == "same_texture":
        texture = rng.randbelow(N_CLASSES)
        sa = rng.randbelow(N_CLASSES)
        return (sa, texture), (other(sa), texture)
    if kind == "random":
        return (
            (rng.randbelow(N_CLASSES), rng.randbelow(N_CLASSES)),
            (rng.randbelow(N_CLASSES), rng.randbelow(N_CLASSES)),
        )
    raise ValueError(f"unknown pair kind {kind!r}")


def generate_factor_pairs(kind: PairKind, m: int, seed: int, workers: int | None = None) -> list[tuple[SynthSample, SynthSample]]:
    if m < 1:
        raise ValueError("m must be >= 1")

    def make(j: int):
        base = SeedSpec(seed, f"pairs:{kind}", j)
        (sa, ta), (sb, tb) = _pair_classes(kind, base.child("classes").rng())
        return compose_sample(sa, ta, base.child("a")), compose_sample(sb, tb, base.child("b"))

    return parallel_map(make, range(m), workers)


def pairs_to_datasets(pairs: list[tuple[SynthSample, SynthSample]]) -> tuple[Dataset, Dataset]:
    return Dataset.from_samples([a for a, _ in pairs]), Dataset.from_samples([b for _, b in pairs])


# ---------------------------------------------------------------------------
# distortions
# ---------------------------------------------------------------------------


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window with replicate borders; works on (..., H, W, C)."""
    if radius <= 0:
        return np.asarray(img)
    size = [1] * img.ndim
    size[-3] = size[-2] = 2 * radius + 1
    return ndimage.uniform_filter(np.asarray(img, dtype=np.float64), size=size, mode="nearest")


def distort(img: np.ndarray, kind: str, level: float, seed: SeedSpec | None = None, clip: bool = True) -> np.ndarray:
    """Apply a parametric distortion of normalised severity ``level`` in [0, 1].

    Accepts one image ``(H, W, C)`` or a batch. Level 0 returns the input
    object untouched. Noise kinds draw from ``seed`` (default: a fixed stream).
    """
    if not 0.0 <= level <= 1.0:
        raise InvalidLevel(f"level must lie in [0, 1], got {level}")
    if kind not in DISTORTIONS:
        raise ValueError(f"unknown distortion {kind!r}; expected one of {DISTORTIONS}")
    img = np.asarray(img)
    if level == 0.0:
        return img
    x = img.astype(np.float64)
    if kind in ("gaussian_noise", "uniform_noise"):
        seed = seed or SeedSpec(0, f"distort:{kind}")
        gen = np.random.Generator(np.random.PCG64(seed.key()))
        std = 0.5 * level
        if kind == "gaussian_noise":
            noise = gen.normal(0.0, std, size=x.shape)
        else:
            half = std * math.sqrt(3.0)
            noise = gen.uniform(-half, half, size=x.shape)
        out = x + noise
    elif kind == "low_pass":
        out = box_blur(x, int(round(4 * level)))
    elif kind == "high_pass":
        out = x - box_blur(x, int(round(4 * level))) + 0.5
    elif kind == "contrast":
        out = (1.0 - level) * x + level * 0.5
    else:
        axes = (x.ndim - 3, x.ndim - 2)
        out = ndimage.rotate(x, 90.0 * level, axes=axes, reshape=False, order=1, mode="constant", cval=0.5)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)
