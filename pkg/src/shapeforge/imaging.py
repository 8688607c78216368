"""Pixel kernels: grayscale, Laplacian edge maps, patch shuffling, superposition.

Images are ``float32`` arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}``
and values in ``[0, 1]``. Batched variants accept a leading ``N`` axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    ImageTooSmall,
    IndivisibleDimensions,
    InvalidLambda,
    InvalidPermutation,
    ShapeMismatch,
)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float32)


@dataclass(frozen=True)
class ShuffledImage:
    image: np.ndarray
    perm: tuple[int, ...]


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeMismatch(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return img


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma grayscale; a 1-channel image is returned unchanged."""
    img = np.asarray(img)
    if img.shape[-1] == 1:
        return img
    if img.shape[-1] != 3:
        raise ShapeMismatch(f"expected 1 or 3 channels, got {img.shape[-1]}")
    r, g, b = (img[..., i].astype(np.float64) for i in range(3))
    gray = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return np.clip(gray, 0.0, 1.0).astype(np.float32)[..., None]


def laplacian(gray: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian of ``(..., H, W)`` arrays with replicate borders."""
    g = np.asarray(gray, dtype=np.float64)
    pad = [(0, 0)] * (g.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(g, pad, mode="edge")
    up = p[..., :-2, 1:-1]
    down = p[..., 2:, 1:-1]
    left = p[..., 1:-1, :-2]
    right = p[..., 1:-1, 2:]
    # pairwise sums keep the result bit-identical under mirroring
    return (up + down) + (left + right) - 4.0 * g


def edge_map(img: np.ndarray) -> np.ndarray:
    """Max-normalised absolute Laplacian response, shape ``(H, W, 1)``.

    Works on a single image or a batch ``(N, H, W, C)``; normalisation is
    always per image. An all-zero response stays all-zero.
    """
    img = np.asarray(img)
    if img.shape[-3] < 3 or img.shape[-2] < 3:
        raise ImageTooSmall(f"edge_map needs H, W >= 3, got {img.shape[-3]}x{img.shape[-2]}")
    gray = to_grayscale(img)[..., 0]
    resp = np.abs(laplacian(gray))
    peak = resp.max(axis=(-2, -1), keepdims=True)
    scale = np.where(peak > 0, peak, 1.0)
    out = resp / scale
    return out.astype(np.float32)[..., None]


def check_permutation(perm: Sequence[int], n: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if len(perm) != n or sorted(perm) != list(range(n)):
        raise InvalidPermutation(f"{perm} is not a permutation of range({n})")
    return perm


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for dst, src in enumerate(perm):
        inv[src] = dst
    return tuple(inv)


def patch_shuffle(img: np.ndarray, grid: int, perm: Sequence[int]) -> ShuffledImage:
    """Rearrange a ``grid x grid`` tiling so destination cell j holds source cell ``perm[j]``.

    Cells are numbered row-major. Output dimensions equal input dimensions.
    """
    img = np.asarray(img)
    h, w, c = img.shape[-3:]
    if grid < 1 or h % grid or w % grid:
        raise IndivisibleDimensions(f"{h}x{w} image cannot be split into a {grid}x{grid} grid")
    perm = check_permutation(perm, grid * grid)
    lead = img.shape[:-3]
    ph, pw = h // grid, w // grid
    blocks = img.reshape(*lead, grid, ph, grid, pw, c)
    blocks = np.moveaxis(blocks, -4, -3).reshape(*lead, grid * grid, ph, pw, c)
    blocks = blocks[..., list(perm), :, :, :]
    out = blocks.reshape(*lead, grid, grid, ph, pw, c)
    out = np.moveaxis(out, -3, -4).reshape(img.shape)
    return ShuffledImage(image=np.ascontiguousarray(out), perm=perm)


def superpose(t: np.ndarray, s: np.ndarray, lam: float) -> np.ndarray:
    """Convex blend ``lam * t + (1 - lam) * s``; ``lam`` weights the texture image.

    Computed in double precision so both endpoints are reproduced exactly and
    the result never leaves the element-wise envelope of the inputs.
    """
    t = np.asarray(t)
    s = np.asarray(s)
    if t.shape != s.shape:
        raise ShapeMismatch(f"cannot superpose {t.shape} onto {s.shape}")
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise InvalidLambda(f"lambda must lie in [0, 1], got {lam}")
    out = lam * t.astype(np.float64) + (1.0 - lam) * s.astype(np.float64)
    return out.astype(np.result_type(t.dtype, s.dtype, np.float32))
