import json

import numpy as np
import pytest

from shapeforge.augment import AugmentConfig, MiniBatch
from shapeforge.errors import ConfigError, DivergedLoss
from shapeforge.model import ModelParams, cross_entropy, forward, loss_and_grad, model_input
from shapeforge.synth import generate_split
from shapeforge.train import TrainConfig, learning_rate, mixed_loss, sgd_step, train


@pytest.fixture(scope="module")
def minibatch():
    nat = generate_split("aligned", 6, 0)
    aug = generate_split("independent", 6, 1)
    return MiniBatch(nat.images, nat.shape_class, aug.images, aug.shape_class)


@pytest.fixture(scope="module")
def params64():
    return ModelParams.init(2).astype(np.float64)


def half_loss(params, images, labels):
    logits = forward(params, model_input(images)).logits
    return float(np.mean(cross_entropy(logits, labels)))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def test_plain_gradient_descent():
    theta = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, 0.5, -1.0])
    new, v = sgd_step(theta, g, np.zeros(3), lr=1.0, momentum=0.0)
    np.testing.assert_array_equal(new, theta - g)
    np.testing.assert_array_equal(v, g)


def test_zero_gradient_is_fixed_point():
    theta = np.array([0.3, 0.7])
    new, v = sgd_step(theta, np.zeros(2), np.zeros(2), lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(new, theta)
    np.testing.assert_array_equal(v, 0)


def test_two_momentum_steps():
    g = np.array([1.0, -2.0])
    theta = np.zeros(2)
    v = np.zeros(2)
    for _ in range(2):
        theta, v = sgd_step(theta, g, v, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(theta, -0.29 * g, atol=1e-12)


def test_sgd_preserves_dtype():
    theta = np.ones(4, np.float32)
    new, v = sgd_step(theta, np.ones(4, np.float32), np.zeros(4, np.float32), 0.1, 0.9)
    assert new.dtype == np.float32 and v.dtype == np.float32


# ---------------------------------------------------------------------------
# mixed objective
# ---------------------------------------------------------------------------


def test_eta_one_is_natural_only(minibatch, params64):
    loss, grad, info = mixed_loss(params64, minibatch, 1.0)
    assert loss == pytest.approx(half_loss(params64, minibatch.natural_images, minibatch.natural_labels), abs=1e-12)
    _, g_nat, _, _ = loss_and_grad(params64, minibatch.natural_images, minibatch.natural_labels)
    np.testing.assert_allclose(grad, g_nat, atol=1e-12)


def test_eta_zero_is_augmented_only(minibatch, params64):
    loss, _, _ = mixed_loss(params64, minibatch, 0.0)
    assert loss == pytest.approx(half_loss(params64, minibatch.augmented_images, minibatch.augmented_labels), abs=1e-12)


def test_loss_is_convex_combination(minibatch, params64):
    loss, _, info = mixed_loss(params64, minibatch, 0.65)
    assert loss == pytest.approx(0.65 * info["nat_loss"] + 0.35 * info["aug_loss"], abs=1e-12)
    # the weighting arithmetic itself, with half losses 1.0 and 2.0
    assert 0.65 * 1.0 + 0.35 * 2.0 == pytest.approx(1.35)


@pytest.mark.parametrize("eta", [0.0, 0.3, 0.65, 1.0])
def test_gradient_linear_in_eta(minibatch, params64, eta):
    _, g_nat, _, _ = loss_and_grad(params64, minibatch.natural_images, minibatch.natural_labels)
    _, g_aug, _, _ = loss_and_grad(params64, minibatch.augmented_images, minibatch.augmented_labels)
    _, grad, _ = mixed_loss(params64, minibatch, eta)
    np.testing.assert_allclose(grad, eta * g_nat + (1 - eta) * g_aug, atol=1e-6, rtol=0)


def test_half_means_ignore_batch_size(params64):
    nat = generate_split("aligned", 4, 0)
    aug = generate_split("independent", 12, 1)
    batch = MiniBatch(nat.images, nat.shape_class, aug.images, aug.shape_class)
    _, _, info = mixed_loss(params64, batch, 0.5)
    assert info["aug_loss"] == pytest.approx(half_loss(params64, aug.images, aug.shape_class), abs=1e-12)


def test_full_batch_descent():
    ds = generate_split("aligned", 40, 2)
    params = ModelParams.init(0)
    velocity = np.zeros_like(params.flat)
    losses = []
    for _ in range(10):
        loss, grad, _, _ = loss_and_grad(params, ds.images, ds.shape_class)
        losses.append(loss)
        params.flat[...], velocity = sgd_step(params.flat, grad, velocity, 1e-3, 0.0)
    assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# schedule and configuration
# ---------------------------------------------------------------------------


def test_step_schedule():
    cfg = TrainConfig(lr=0.1, epochs=10)
    assert [learning_rate(cfg, e) for e in (0, 2, 3, 5, 6, 8, 9)] == pytest.approx(
        [0.1, 0.1, 0.01, 0.01, 0.001, 0.001, 0.0001]
    )


def test_cosine_schedule():
    cfg = TrainConfig(lr=0.2, epochs=4, schedule="cosine")
    assert learning_rate(cfg, 0) == pytest.approx(0.2)
    assert learning_rate(cfg, 2) == pytest.approx(0.1)


@pytest.mark.parametrize(
    "kwargs",
    [{"eta": 1.2}, {"eta": -0.1}, {"lr": 0.0}, {"momentum": 1.0}, {"epochs": -1}, {"batch_size": 0}, {"schedule": "linear"}],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_eleas_needs_even_batch():
    ds = generate_split("aligned", 10, 0)
    with pytest.raises(ConfigError):
        train(ds, "eleas", TrainConfig(epochs=1, batch_size=5))
    with pytest.raises(ConfigError):
        train(ds, "mixup", TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_zero_epochs_returns_init():
    ds = generate_split("aligned", 20, 0)
    params, history = train(ds, "baseline", TrainConfig(epochs=0, seed=4))
    assert params == ModelParams.init(4) and history == []


@pytest.mark.parametrize("mode", ["baseline", "eleas"])
def test_training_is_deterministic(mode, tmp_path):
    ds = generate_split("aligned", 60, 0)
    cfg = TrainConfig(epochs=2, batch_size=10, seed=1)
    a, hist_a = train(ds, mode, cfg, log_path=tmp_path / "a.jsonl")
    b, hist_b = train(ds, mode, cfg, log_path=tmp_path / "b.jsonl")
    assert a.flat.tobytes() == b.flat.tobytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert hist_a == hist_b


def test_log_records(tmp_path):
    ds = generate_split("aligned", 40, 0)
    train(ds, "eleas", TrainConfig(epochs=2, batch_size=10), AugmentConfig(seed=2), log_path=tmp_path / "log.jsonl")
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    for r in records:
        assert set(r) == {"epoch", "lr", "train_loss", "nat_loss", "aug_loss", "train_acc"}
        assert r["train_loss"] == pytest.approx(0.65 * r["nat_loss"] + 0.35 * r["aug_loss"], rel=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = generate_split("aligned", 20, 0)
    with pytest.raises(DivergedLoss, match="epoch"):
        train(ds, "baseline", TrainConfig(lr=1e6, epochs=3, batch_size=10))


def test_baseline_learns_aligned_split():
    ds = generate_split("aligned", 2000, 0)
    params, history = train(ds, "baseline", TrainConfig(lr=0.05, batch_size=50, epochs=5))
    logits = forward(params, model_input(ds.images)).logits
    assert np.mean(logits.argmax(axis=1) == ds.shape_class) >= 0.95
    assert history[-1]["train_loss"] < history[0]["train_loss"]
