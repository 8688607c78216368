"""Training loops: plain cross-entropy baseline and the mixed natural/augmented objective."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .augment import AugmentConfig, EdgeCache, MiniBatch, augmented_batch, batch_indices, compose_batch
from .errors import ConfigError, DivergedLoss
from .model import ModelParams, loss_and_grad
from .synth import Dataset

log = logging.getLogger(__name__)

TrainerMode = Literal["baseline", "eleas"]
MILESTONES = (0.3, 0.6, 0.9)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.65
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 50
    schedule: Literal["step", "cosine"] = "step"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.schedule not in ("step", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Step decay by 10x at 30/60/90% of training, or a cosine ramp."""
    if config.schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(config.epochs, 1)))
    drops = sum(epoch >= round(f * config.epochs) for f in MILESTONES)
    return config.lr * 0.1**drops


def mixed_loss(params: ModelParams, batch: MiniBatch, eta: float):
    """``eta * mean CE(natural) + (1 - eta) * mean CE(augmented)`` and its gradient.

    Both halves go through a single forward/backward pass with per-sample
    weights. Returns ``(loss, grad, info)`` where ``info`` carries the two
    half losses and the natural-half predictions.
    """
    n_nat = len(batch.natural_labels)
    n_aug = len(batch.augmented_labels)
    images = np.concatenate([batch.natural_images, batch.augmented_images])
    labels = np.concatenate([batch.natural_labels, batch.augmented_labels])
    weights = np.concatenate([np.full(n_nat, eta / n_nat), np.full(n_aug, (1.0 - eta) / n_aug)])
    loss, grad, trace, ce = loss_and_grad(params, images, labels, weights)
    info = {
        "nat_loss": float(ce[:n_nat].mean()),
        "aug_loss": float(ce[n_nat:].mean()),
        "nat_correct": int((trace.logits[:n_nat].argmax(axis=1) == batch.natural_labels).sum()),
    }
    return loss, grad, info


def sgd_step(theta: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float):
    """Heavy-ball update: ``v' = m v + g``, ``theta' = theta - lr v'``."""
    dtype = theta.dtype
    v = (dtype.type(momentum) * velocity + grad).astype(dtype)
    return (theta - dtype.type(lr) * v).astype(dtype), v


def _check_finite(loss: float, epoch: int, step: int):
    if not math.isfinite(loss):
        raise DivergedLoss(f"loss became {loss} at epoch {epoch}, step {step}; try a smaller learning rate")


def train(
    dataset: Dataset,
    mode: TrainerMode,
    config: TrainConfig,
    augment: AugmentConfig | None = None,
    log_path: str | Path | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train from a seeded He initialisation; fully deterministic in ``config.seed``."""
    if mode not in ("baseline", "eleas"):
        raise ConfigError(f"unknown trainer mode {mode!r}")
    if mode == "eleas" and (config.batch_size < 2 or config.batch_size % 2):
        raise ConfigError(f"eleas mode needs an even batch size, got {config.batch_size}")
    augment = augment or AugmentConfig(seed=config.seed)
    params = ModelParams.init(config.seed)
    velocity = np.zeros_like(params.flat)
    images = dataset.images
    labels = dataset.shape_class.astype(np.int64)
    n = len(labels)
    history: list[dict] = []
    cache = EdgeCache(dataset) if mode == "eleas" else None
    sink = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            lr = learning_rate(config, epoch)
            losses, nat_losses, aug_losses = [], [], []
            correct = seen = 0
            if mode == "baseline":
                steps = -(-n // config.batch_size)
                for _ in range(steps):
                    idx = batch_indices(n, config.batch_size, step, config.seed, "batch:natural")
                    loss, grad, trace, _ = loss_and_grad(params, images[idx], labels[idx])
                    _check_finite(loss, epoch, step)
                    params.flat[...], velocity = sgd_step(params.flat, grad, velocity, lr, config.momentum)
                    losses.append(loss)
                    nat_losses.append(loss)
                    correct += int((trace.logits.argmax(axis=1) == labels[idx]).sum())
                    seen += len(idx)
                    step += 1
            else:
                aug_images, aug_labels, _ = augmented_batch(dataset, range(n), epoch, augment, cache)
                half = config.batch_size // 2
                steps = -(-n // half)
                for _ in range(steps):
                    batch = compose_batch((images, labels), (aug_images, aug_labels), config.batch_size, step, config.seed)
                    loss, grad, info = mixed_loss(params, batch, config.eta)
                    _check_finite(loss, epoch, step)
                    params.flat[...], velocity = sgd_step(params.flat, grad, velocity, lr, config.momentum)
                    losses.append(loss)
                    nat_losses.append(info["nat_loss"])
                    aug_losses.append(info["aug_loss"])
                    correct += info["nat_correct"]
                    seen += len(batch.natural_labels)
                    step += 1
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "nat_loss": float(np.mean(nat_losses)),
                "aug_loss": float(np.mean(aug_losses)) if aug_losses else None,
                "train_acc": correct / max(seen, 1),
            }
            history.append(record)
            log.info("%s epoch %d lr=%.4g loss=%.4f acc=%.3f", mode, epoch, lr, record["train_loss"], record["train_acc"])
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if sink:
            sink.close()
    return params, history


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
