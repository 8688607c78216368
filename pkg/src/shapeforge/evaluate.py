"""Metrics: accuracy, cue-conflict shape bias, shape-factor dimension counts,
binary mask readout (mIoU) and distortion-robustness curves.

Every metric accepts either :class:`~shapeforge.model.ModelParams` or any
callable mapping an image batch to logits, so metrics can be checked against
hand-built predictors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DegenerateDimension, EmptySplit, NotConflictSplit
from .model import embed, predict
from .sampling import SeedSpec, sample_permutation
from .synth import N_CLASSES, Dataset, distort, parallel_map

DEFAULT_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
FACTORS = ("shape", "texture", "residual")


def predictions(model, images: np.ndarray) -> np.ndarray:
    """Argmax class per image; ties go to the lowest class index."""
    return np.asarray(predict(model, images)).argmax(axis=1)


def accuracy(model, split: Dataset) -> float:
    if len(split) == 0:
        raise EmptySplit("accuracy of an empty split is undefined")
    return float(np.mean(predictions(model, split.images) == split.shape_class))


# ---------------------------------------------------------------------------
# cue-conflict shape bias
# ---------------------------------------------------------------------------


@dataclass
class ShapeBiasResult:
    shape_correct: int
    texture_correct: int
    neither: int
    shape_bias: float | None
    coverage: float
    per_class: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "shape_correct": self.shape_correct,
            "texture_correct": self.texture_correct,
            "neither": self.neither,
            "shape_bias": self.shape_bias,
            "coverage": self.coverage,
            "per_class": self.per_class,
        }


def _bias(shape: int, texture: int) -> float | None:
    return shape / (shape + texture) if shape + texture else None


def shape_bias_from_predictions(preds, shape_class, texture_class) -> ShapeBiasResult:
    preds = np.asarray(preds)
    shape_class = np.asarray(shape_class)
    texture_class = np.asarray(texture_class)
    if len(preds) == 0:
        raise EmptySplit("no cue-conflict samples")
    if np.any(shape_class == texture_class):
        raise NotConflictSplit("cue-conflict split contains records whose shape and texture classes agree")
    hit_shape = preds == shape_class
    hit_texture = preds == texture_class
    per_class = []
    for c in range(N_CLASSES):
        sel = shape_class == c
        s, t = int(hit_shape[sel].sum()), int(hit_texture[sel].sum())
        per_class.append(
            {"class": c, "shape_correct": s, "texture_correct": t, "neither": int(sel.sum()) - s - t, "shape_bias": _bias(s, t)}
        )
    s, t = int(hit_shape.sum()), int(hit_texture.sum())
    n = len(preds)
    return ShapeBiasResult(s, t, n - s - t, _bias(s, t), (s + t) / n, per_class)


def shape_bias(model, conflict_split: Dataset) -> ShapeBiasResult:
    """Fraction of shape decisions among predictions matching either cue."""
    if np.any(conflict_split.shape_class == conflict_split.texture_class):
        raise NotConflictSplit("shape_bias requires a split generated in conflict mode")
    preds = predictions(model, conflict_split.images)
    return shape_bias_from_predictions(preds, conflict_split.shape_class, conflict_split.texture_class)


# ---------------------------------------------------------------------------
# shape factor
# ---------------------------------------------------------------------------


@dataclass
class ShapeFactorResult:
    assignments: list[str]
    shape_fraction: float
    texture_fraction: float
    residual_fraction: float
    scores: dict[str, list[float]]

    def to_dict(self) -> dict:
        return {
            "shape_fraction": self.shape_fraction,
            "texture_fraction": self.texture_fraction,
            "residual_fraction": self.residual_fraction,
            "assignments": list(self.assignments),
            "scores": self.scores,
        }


def pair_correlation(za: np.ndarray, zb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension Pearson correlation between pair members.

    Returns ``(rho, degenerate)``; degenerate dims (zero variance in either
    member) get ``rho = 0``.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    da = za - za.mean(axis=0)
    db = zb - zb.mean(axis=0)
    va = (da * da).sum(axis=0)
    vb = (db * db).sum(axis=0)
    scale = np.sqrt(va * vb)
    # relative threshold: constant dims can carry rounding noise from the mean
    tiny = 1e-24 + 1e-20 * (np.abs(za).max(axis=0) * np.abs(zb).max(axis=0)) ** 2 * len(za)
    degenerate = scale <= np.sqrt(tiny)
    rho = np.where(degenerate, 0.0, (da * db).sum(axis=0) / np.where(degenerate, 1.0, scale))
    return np.clip(rho, -1.0, 1.0), degenerate


def critical_correlation(m: int, alpha: float = 0.01) -> float:
    """Two-sided critical |r| for ``m`` pairs under the null of no correlation."""
    if m <= 2:
        return 1.0
    t = stats.t.ppf(1.0 - alpha / 2.0, m - 2)
    return float(t / math.sqrt(m - 2 + t * t))


def shape_factor_from_embeddings(pair_embeddings: dict[str, tuple[np.ndarray, np.ndarray]], alpha: float = 0.01) -> ShapeFactorResult:
    """Assign each embedding dimension to shape, texture or residual.

    ``pair_embeddings`` maps ``same_shape``, ``same_texture`` and ``random``
    to ``(z_a, z_b)`` arrays of shape ``(m, D)``. A dimension's factor score
    is its clamped pair correlation on the matching pair set; the residual
    score is the clamped random-pair correlation plus the critical
    correlation at level ``alpha``, so a dimension only counts toward a
    factor if it beats chance pairing significantly. Ties go to residual.
    """
    for kind in ("same_shape", "same_texture", "random"):
        if kind not in pair_embeddings:
            raise KeyError(f"missing pair set {kind!r}")
    rho = {}
    degenerate = None
    for kind, (za, zb) in pair_embeddings.items():
        r, deg = pair_correlation(za, zb)
        rho[kind] = np.maximum(r, 0.0)
        degenerate = deg if degenerate is None else degenerate | deg
    m = len(pair_embeddings["random"][0])
    scores = np.stack(
        [rho["same_shape"], rho["same_texture"], rho["random"] + critical_correlation(m, alpha)], axis=0
    )
    dims = scores.shape[1]
    assignments = []
    for k in range(dims):
        if degenerate[k]:
            warnings.warn(f"embedding dimension {k} has zero variance over a pair set", DegenerateDimension, stacklevel=2)
            assignments.append("residual")
            continue
        col = scores[:, k]
        best = col.max()
        winners = [FACTORS[i] for i in range(3) if col[i] == best]
        assignments.append(winners[0] if len(winners) == 1 else "residual")
    counts = {f: assignments.count(f) for f in FACTORS}
    return ShapeFactorResult(
        assignments=assignments,
        shape_fraction=counts["shape"] / dims,
        texture_fraction=counts["texture"] / dims,
        residual_fraction=counts["residual"] / dims,
        scores={"shape": rho["same_shape"].tolist(), "texture": rho["same_texture"].tolist(), "residual": scores[2].tolist()},
    )


def shape_factor(model, pair_sets: dict[str, tuple[Dataset, Dataset]], embed_fn=None) -> ShapeFactorResult:
    """Shape factor of ``model``'s 16-dim embedding ``z``.

    ``pair_sets`` maps each pair kind to two aligned datasets (first and
    second pair members); each set needs at least 200 pairs.
    """
    embed_fn = embed_fn or (lambda images: embed(model, images)[0])
    emb = {}
    for kind, (a, b) in pair_sets.items():
        if len(a) != len(b):
            raise ValueError(f"pair set {kind!r} has mismatched member counts")
        if len(a) < 200:
            raise ValueError(f"pair set {kind!r} has {len(a)} pairs; at least 200 are required")
        emb[kind] = (embed_fn(a.images), embed_fn(b.images))
    return shape_factor_from_embeddings(emb)


# ---------------------------------------------------------------------------
# binary mask readout on frozen features
# ---------------------------------------------------------------------------


@dataclass
class ReadoutWeights:
    w: np.ndarray
    b: float
    mean: np.ndarray
    std: np.ndarray


def upsample_features(features: np.ndarray, size: int = 32) -> np.ndarray:
    """Nearest-neighbour upsampling of ``(N, h, w, C)`` maps to ``(N, size, size, C)``."""
    f = np.asarray(features)
    ry, rx = size // f.shape[1], size // f.shape[2]
    return np.repeat(np.repeat(f, ry, axis=1), rx, axis=2)


def readout_features(model, images: np.ndarray) -> np.ndarray:
    return upsample_features(embed(model, images)[1])


def mask_readout_train(
    model,
    split: Dataset,
    *,
    features: np.ndarray | None = None,
    epochs: int = 10,
    lr: float = 0.5,
    batch_images: int = 20,
    seed: int = 0,
) -> ReadoutWeights:
    """Per-pixel logistic regression from frozen features to the shape mask.

    ``features`` (``(N, 32, 32, C)``) bypasses the model when given.
    """
    x = readout_features(model, split.images) if features is None else np.asarray(features, dtype=np.float64)
    y = split.masks.astype(np.float64)
    n, h, w, c = x.shape
    mean = x.reshape(-1, c).mean(axis=0)
    std = x.reshape(-1, c).std(axis=0)
    std = np.where(std > 0, std, 1.0)
    xs = ((x - mean) / std).reshape(n, h * w, c)
    ys = y.reshape(n, h * w)
    weights = np.zeros(c)
    bias = 0.0
    step = 0
    for epoch in range(epochs):
        order = sample_permutation(SeedSpec(seed, f"readout:{epoch}"), n)
        for start in range(0, n, batch_images):
            idx = list(order[start : start + batch_images])
            xb = xs[idx].reshape(-1, c)
            yb = ys[idx].reshape(-1)
            logits = xb @ weights + bias
            err = 1.0 / (1.0 + np.exp(-logits)) - yb
            weights -= lr * (xb.T @ err) / len(yb)
            bias -= lr * float(err.mean())
            step += 1
    return ReadoutWeights(weights, bias, mean, std)


def iou_scores(pred: np.ndarray, truth: np.ndarray) -> dict[str, float]:
    """Dataset-level IoU for foreground and background; an absent class scores 1."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    out = {}
    for name, p, t in (("foreground", pred, truth), ("background", ~pred, ~truth)):
        union = int(np.logical_or(p, t).sum())
        inter = int(np.logical_and(p, t).sum())
        out[name] = 1.0 if union == 0 else inter / union
    return out


def mask_readout_predict(weights: ReadoutWeights, features: np.ndarray) -> np.ndarray:
    x = (np.asarray(features, dtype=np.float64) - weights.mean) / weights.std
    return (x @ weights.w + weights.b) > 0.0  # sigmoid > 0.5


def mask_readout_eval(model, weights: ReadoutWeights, split: Dataset, *, features: np.ndarray | None = None) -> float:
    """Mean IoU over {foreground, background} at threshold 0.5."""
    x = readout_features(model, split.images) if features is None else features
    pred = mask_readout_predict(weights, x)
    scores = iou_scores(pred, split.masks)
    return (scores["foreground"] + scores["background"]) / 2.0


# ---------------------------------------------------------------------------
# distortion robustness
# ---------------------------------------------------------------------------


@dataclass
class RobustnessCurve:
    kind: str
    levels: list[float]
    acc: list[float]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "levels": list(self.levels), "acc": list(self.acc)}


def robustness_sweep(
    model, split: Dataset, kinds, levels=DEFAULT_LEVELS, seed: int = 0, workers: int | None = None
) -> list[RobustnessCurve]:
    """Accuracy per (kind, level) cell; cells run in parallel, results keep input order."""
    kinds = list(kinds)
    levels = [float(v) for v in levels]

    def cell(item):
        kind, level = item
        images = distort(split.images, kind, level, seed=SeedSpec(seed, f"robustness:{kind}:{level!r}"))
        return float(np.mean(predictions(model, images) == split.shape_class))

    accs = parallel_map(cell, [(k, lv) for k in kinds for lv in levels], workers)
    n = len(levels)
    return [RobustnessCurve(k, levels, accs[i * n : (i + 1) * n]) for i, k in enumerate(kinds)]
