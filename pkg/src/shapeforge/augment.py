"""Edge-map / shuffled-texture superpositions and half-natural minibatches.

An augmented image blends a patch-shuffled image ``t`` (weight ``lam``) with
the edge map ``s`` of a different, randomly paired image (weight
``1 - lam``). It always carries the label of the edge-map source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset_io import write_dataset
from .errors import EmptyPool, OddBatchSize
from .imaging import edge_map, patch_shuffle, superpose
from .sampling import BetaParams, SeedSpec, sample_lambda, sample_pairing, sample_permutation
from .synth import N_CLASSES, Dataset, DatasetManifest, parallel_map


@dataclass(frozen=True)
class AugmentConfig:
    alpha: float = 4.0
    beta: float = 1.0
    grid: int = 2
    seed: int = 0

    @property
    def beta_params(self) -> BetaParams:
        return BetaParams(self.alpha, self.beta)


@dataclass(frozen=True)
class Provenance:
    idx: int
    shape_src: int
    texture_src: int
    lam: float
    perm: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "idx": self.idx,
            "shape_src": self.shape_src,
            "texture_src": self.texture_src,
            "lambda": self.lam,
            "perm": list(self.perm),
        }


@dataclass
class AugmentedSample:
    image: np.ndarray
    label: int
    provenance: Provenance


@dataclass
class MiniBatch:
    natural_images: np.ndarray
    natural_labels: np.ndarray
    augmented_images: np.ndarray
    augmented_labels: np.ndarray


class EdgeCache:
    """Edge maps of a dataset, computed once and reused across epochs."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._edges: np.ndarray | None = None

    @property
    def edges(self) -> np.ndarray:
        if self._edges is None:
            self._edges = edge_map(self.dataset.images)
        return self._edges


def augment_seed(config: AugmentConfig, epoch: int, idx: int) -> SeedSpec:
    return SeedSpec(config.seed, f"augment:{epoch}", idx)


def draw_provenance(n: int, idx: int, epoch: int, config: AugmentConfig, lam: float | None = None) -> Provenance:
    """All random choices for augmented sample ``idx`` of ``epoch``.

    ``lam`` overrides the Beta draw (boundary-case test hook).
    """
    seed = augment_seed(config, epoch, idx)
    ((shape_src, texture_src),) = sample_pairing(seed.child("pair"), n, n, 1)
    perm = sample_permutation(seed.child("perm"), config.grid * config.grid)
    if lam is None:
        lam = sample_lambda(seed.child("lambda"), config.beta_params)
    return Provenance(idx, shape_src, texture_src, float(lam), perm)


def render_augmented(dataset: Dataset, prov: Provenance, grid: int, edges: np.ndarray | None = None) -> np.ndarray:
    s = edges[prov.shape_src] if edges is not None else edge_map(dataset.images[prov.shape_src])
    t = patch_shuffle(dataset.images[prov.texture_src], grid, prov.perm).image
    return superpose(t, s, prov.lam)


def make_augmented(
    dataset: Dataset,
    idx: int,
    epoch: int,
    config: AugmentConfig,
    lam: float | None = None,
    cache: EdgeCache | None = None,
) -> AugmentedSample:
    if len(dataset) == 0:
        raise EmptyPool("cannot augment an empty dataset")
    if idx < 0:
        raise ValueError("idx must be >= 0")
    prov = draw_provenance(len(dataset), idx, epoch, config, lam)
    edges = cache.edges if cache is not None else None
    image = render_augmented(dataset, prov, config.grid, edges)
    return AugmentedSample(image=image, label=int(dataset.shape_class[prov.shape_src]), provenance=prov)


def regenerate_from_provenance(dataset: Dataset, prov: Provenance, grid: int) -> np.ndarray:
    return render_augmented(dataset, prov, grid)


def augmented_batch(
    dataset: Dataset, indices, epoch: int, config: AugmentConfig, cache: EdgeCache | None = None
) -> tuple[np.ndarray, np.ndarray, list[Provenance]]:
    """Vectorised rendering of many augmented samples (same result as one at a time)."""
    cache = cache or EdgeCache(dataset)
    provs = [draw_provenance(len(dataset), int(i), epoch, config) for i in indices]
    if not provs:
        return np.zeros((0,) + dataset.images.shape[1:], np.float32), np.zeros(0, np.int64), []
    g = config.grid
    src = dataset.images[[p.texture_src for p in provs]]
    n, h, w, c = src.shape
    blocks = src.reshape(n, g, h // g, g, w // g, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, g * g, h // g, w // g, c)
    perms = np.array([p.perm for p in provs])
    blocks = np.take_along_axis(blocks, perms[:, :, None, None, None], axis=1)
    t = blocks.reshape(n, g, g, h // g, w // g, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)
    s = cache.edges[[p.shape_src for p in provs]]
    lam = np.array([p.lam for p in provs], dtype=np.float64)[:, None, None, None]
    images = (lam * t.astype(np.float64) + (1.0 - lam) * s.astype(np.float64)).astype(np.float32)
    labels = dataset.shape_class[[p.shape_src for p in provs]].astype(np.int64)
    return images, labels, provs


@lru_cache(maxsize=64)
def epoch_order(seed: int, stream: str, epoch: int, n: int) -> tuple[int, ...]:
    return sample_permutation(SeedSpec(seed, f"{stream}:{epoch}"), n)


def batch_indices(pool_size: int, per_batch: int, step: int, seed: int, stream: str) -> np.ndarray:
    """Indices for one step of shuffled-epoch sampling without replacement.

    Each epoch is ``ceil(pool_size / per_batch)`` steps; the final step of an
    epoch may be short.
    """
    steps = -(-pool_size // per_batch)
    epoch, pos = divmod(step, steps)
    order = epoch_order(seed, stream, epoch, pool_size)
    return np.array(order[pos * per_batch : (pos + 1) * per_batch], dtype=np.int64)


def compose_batch(natural_pool, augmented_pool, batch_size: int, step: int, seed: int) -> MiniBatch:
    """Half natural, half augmented; each pool is ``(images, labels)``."""
    if batch_size < 2 or batch_size % 2:
        raise OddBatchSize(f"batch_size must be even and >= 2, got {batch_size}")
    nat_images, nat_labels = natural_pool
    aug_images, aug_labels = augmented_pool
    if len(nat_labels) == 0 or len(aug_labels) == 0:
        raise EmptyPool("both natural and augmented pools must be nonempty")
    half = batch_size // 2
    steps = -(-len(nat_labels) // half)
    ni = batch_indices(len(nat_labels), half, step, seed, "batch:natural")
    ai = batch_indices(len(aug_labels), half, step, seed, "batch:augmented")
    # the augmented side may be shorter than a natural step at epoch ends
    if len(ai) < len(ni):
        extra = batch_indices(len(aug_labels), half, step + steps, seed, "batch:augmented")
        ai = np.concatenate([ai, extra])[: len(ni)]
    ai = ai[: len(ni)]
    return MiniBatch(nat_images[ni], np.asarray(nat_labels)[ni], aug_images[ai], np.asarray(aug_labels)[ai])


def materialize_augmented_set(
    dataset: Dataset,
    epoch: int,
    n: int,
    config: AugmentConfig,
    out_path: str | Path,
    workers: int | None = None,
) -> DatasetManifest:
    """Write ``n`` augmented samples (SFDS) plus ``<out>.provenance.json``.

    Records store the edge-source label and mask, and the texture source's
    texture class.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_path = Path(out_path)
    cache = EdgeCache(dataset)
    cache.edges  # materialise before fanning out to threads
    chunk = 256
    starts = list(range(0, n, chunk))
    parts = parallel_map(
        lambda s: augmented_batch(dataset, range(s, min(n, s + chunk)), epoch, config, cache), starts, workers
    )
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    provs = [pv for p in parts for pv in p[2]]
    shape_src = [p.shape_src for p in provs]
    aug = Dataset(
        images=images,
        shape_class=labels,
        texture_class=dataset.texture_class[[p.texture_src for p in provs]],
        masks=dataset.masks[shape_src],
    )
    manifest = DatasetManifest(
        split=out_path.stem,
        count=n,
        class_counts=np.bincount(labels, minlength=N_CLASSES).tolist(),
        mode="augmented",
        seed=config.seed,
        extra={"epoch": epoch, "alpha": config.alpha, "beta": config.beta, "grid": config.grid},
    )
    write_dataset(aug, out_path, manifest)
    provenance = {
        "records": [p.to_dict() for p in provs],
        "config": {"alpha": config.alpha, "beta": config.beta, "grid": config.grid, "seed": config.seed, "epoch": epoch},
    }
    provenance_path(out_path).write_text(json.dumps(provenance, sort_keys=True) + "\n")
    return manifest


def provenance_path(out_path: str | Path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.name + ".provenance.json")
