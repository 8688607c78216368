import hashlib
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeforge.errors import ChecksumMismatch, ShapeMismatch, VersionMismatch
from shapeforge.model import (
    LAYOUT,
    N_PARAMS,
    ModelParams,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
    cross_entropy,
    embed,
    forward,
    loss_and_grad,
    predict,
    softmax,
)
from shapeforge.synth import generate_split


@pytest.fixture(scope="module")
def batch():
    ds = generate_split("independent", 8, 4)
    return ds.images, ds.shape_class


def fd_check(params64, images, labels, indices, h):
    """Central differences of the mean CE at the given flat indices."""
    _, grad, _, _ = loss_and_grad(params64, images, labels)
    errs = []
    for i in indices:
        plus = params64.copy()
        minus = params64.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        numeric = (loss_and_grad(plus, images, labels)[0] - loss_and_grad(minus, images, labels)[0]) / (2 * h)
        errs.append((grad[i], numeric))
    return errs


def within_tolerance(analytic, numeric):
    if abs(analytic) < 1e-3:
        return abs(analytic - numeric) <= 1e-6
    return abs(analytic - numeric) / abs(analytic) <= 1e-4


def test_parameter_count():
    assert N_PARAMS == (72 + 8) + (1152 + 16) + (160 + 10) == 1418
    assert [name for name, _ in LAYOUT] == ["conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b"]


def test_views_share_storage():
    p = ModelParams.zeros()
    p["fc_b"][3] = 2.0
    assert p.flat[-7] == 2.0


def test_init_is_seeded_and_scaled():
    a = ModelParams.init(3)
    assert a == ModelParams.init(3)
    assert a != ModelParams.init(4)
    assert np.all(a["conv1_b"] == 0) and np.all(a["fc_b"] == 0)
    # He-normal: std sqrt(2 / fan_in); conv2 has 1152 draws so the estimate is tight
    assert a["conv2_w"].std() == pytest.approx(math.sqrt(2 / 72), rel=0.1)


def test_zero_network_is_uniform():
    logits = forward(ModelParams.zeros(), np.random.default_rng(0).random((3, 32, 32, 1))).logits
    assert np.all(logits == 0)
    np.testing.assert_allclose(softmax(logits), 0.1, atol=1e-7)


def test_zero_input_gives_zero_embedding():
    params = ModelParams.init(1)
    params["fc_b"][...] = 0.7
    trace = forward(params, np.zeros((2, 32, 32, 1), np.float32))
    assert np.all(trace.embedding == 0)
    np.testing.assert_allclose(trace.logits, 0.7, atol=1e-7)


def test_embedding_is_mean_of_features(batch):
    trace = forward(ModelParams.init(2), batch[0])
    assert trace.features.shape == (8, 8, 8, 16)
    manual = np.array([[trace.features[n, :, :, k].mean() for k in range(16)] for n in range(8)])
    np.testing.assert_allclose(trace.embedding, manual, atol=1e-6)


def test_relu_outputs_nonnegative(batch):
    trace = forward(ModelParams.init(2), batch[0] - 0.5)
    assert trace.act1.min() >= 0 and trace.act2.min() >= 0
    np.testing.assert_allclose(softmax(trace.logits).sum(axis=1), 1.0, atol=1e-6)


def test_single_image_is_promoted():
    params = ModelParams.init(0)
    img = np.random.default_rng(1).random((32, 32, 1)).astype(np.float32)
    np.testing.assert_array_equal(forward(params, img).logits, forward(params, img[None]).logits)


def test_wrong_input_shape():
    with pytest.raises(ShapeMismatch):
        forward(ModelParams.zeros(), np.zeros((1, 28, 28, 1)))
    with pytest.raises(ShapeMismatch):
        ModelParams(np.zeros(10))


def test_conv_matches_direct_loop():
    params = ModelParams.init(5)
    params["conv1_b"][...] = np.linspace(-0.1, 0.1, 8)
    img = np.random.default_rng(2).random((32, 32, 1)).astype(np.float32)
    pre1 = forward(params, img).pre1[0]
    padded = np.pad(img[..., 0], 1)
    w = params["conv1_w"][..., 0, :]
    for y, x in [(0, 0), (5, 17), (31, 31), (16, 0)]:
        expected = (padded[y : y + 3, x : x + 3, None] * w).sum(axis=(0, 1)) + params["conv1_b"]
        np.testing.assert_allclose(pre1[y, x], expected, atol=1e-5)


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------


def test_ce_uniform():
    assert cross_entropy(np.zeros(10), 4) == pytest.approx(math.log(10), abs=1e-9)


def test_ce_saturated():
    logits = np.zeros(10)
    logits[0] = 1000.0
    loss = cross_entropy(logits, 0)
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)


def test_ce_hand_value():
    logits = np.array([2.0, 1.0] + [0.0] * 8)
    expected = -math.log(math.e**2 / (math.e**2 + math.e + 8))
    assert cross_entropy(logits, 0) == pytest.approx(expected, abs=1e-12)
    assert cross_entropy(logits, 0) == pytest.approx(0.896317, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=10, max_size=10), st.integers(0, 9))
def test_ce_never_nan(logits, label):
    loss = cross_entropy(np.array(logits), label)
    assert math.isfinite(loss) and loss >= 0


def test_ce_vectorised():
    logits = np.random.default_rng(0).normal(size=(5, 10))
    labels = np.array([0, 3, 9, 1, 1])
    np.testing.assert_allclose(cross_entropy(logits, labels), [cross_entropy(r, y) for r, y in zip(logits, labels)])


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_gradient_matches_finite_differences():
    ds = generate_split("independent", 2, 4)
    params = ModelParams.init(0).astype(np.float64)
    rng = np.random.default_rng(20)
    indices = rng.choice(N_PARAMS, size=20, replace=False)
    for analytic, numeric in fd_check(params, ds.images.astype(np.float64), ds.shape_class, indices, 1e-3):
        assert within_tolerance(analytic, numeric), (analytic, numeric)


def test_gradient_small_step_many_parameters(batch):
    # a tiny step keeps every perturbation clear of ReLU / max-pool switch points
    params = ModelParams.init(1).astype(np.float64)
    indices = np.random.default_rng(7).choice(N_PARAMS, size=150, replace=False)
    for analytic, numeric in fd_check(params, batch[0].astype(np.float64), batch[1], indices, 1e-6):
        assert abs(analytic - numeric) <= 1e-7 + 1e-4 * abs(analytic)


def test_weighted_loss_gradient(batch):
    params = ModelParams.init(0).astype(np.float64)
    images, labels = batch[0].astype(np.float64), batch[1]
    w = np.linspace(0.01, 0.2, 8)
    loss, grad, _, ce = loss_and_grad(params, images, labels, w)
    assert loss == pytest.approx(float(w @ ce))
    # linear in the weights: compare against per-sample gradients
    total = sum(w[i] * loss_and_grad(params, images[i : i + 1], labels[i : i + 1])[1] for i in range(8))
    np.testing.assert_allclose(grad, total, atol=1e-12)


def test_predict_and_embed(batch):
    params = ModelParams.init(3)
    logits = predict(params, batch[0], batch_size=3)
    z, feats = embed(params, batch[0], batch_size=5)
    assert logits.shape == (8, 10) and z.shape == (8, 16) and feats.shape == (8, 8, 8, 16)
    np.testing.assert_allclose(logits, z @ params["fc_w"] + params["fc_b"], atol=1e-5)
    assert np.array_equal(predict(lambda x: np.ones((len(x), 10)), batch[0]), np.ones((8, 10)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    params = ModelParams.init(9)
    digest = checkpoint_save(params, tmp_path / "m.ckpt")
    assert len(digest) == 64
    back = checkpoint_load(tmp_path / "m.ckpt")
    assert back == params
    assert back.flat.tobytes() == params.flat.tobytes()


def test_checkpoint_bytes_deterministic():
    assert checkpoint_bytes(ModelParams.init(1)) == checkpoint_bytes(ModelParams.init(1))


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint_save(ModelParams.init(0), path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ChecksumMismatch):
        checkpoint_load(path)


def test_flipped_byte(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint_save(ModelParams.init(0), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        checkpoint_load(path)


def _reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def test_count_mismatch_reports_both(tmp_path):
    blob = checkpoint_bytes(ModelParams.init(0))
    body = blob[:-32]
    (head_len,) = struct.unpack_from("<I", body)
    # drop three floats from the payload but keep the header
    path = tmp_path / "m.ckpt"
    path.write_bytes(_reseal(body[:-12]))
    with pytest.raises(VersionMismatch) as err:
        checkpoint_load(path)
    assert "1418" in str(err.value) and "1415" in str(err.value)
    assert head_len > 0


def test_format_version_mismatch(tmp_path):
    body = checkpoint_bytes(ModelParams.init(0))[:-32]
    (head_len,) = struct.unpack_from("<I", body)
    head = body[4 : 4 + head_len].replace(b'"format_version": 1', b'"format_version": 7')
    path = tmp_path / "m.ckpt"
    path.write_bytes(_reseal(struct.pack("<I", len(head)) + head + body[4 + head_len :]))
    with pytest.raises(VersionMismatch):
        checkpoint_load(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(OSError):
        checkpoint_load(tmp_path / "absent.ckpt")
