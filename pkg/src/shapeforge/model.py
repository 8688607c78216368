"""Two-layer convolutional classifier with hand-written backpropagation.

Architecture (input 32x32x1)::

    conv 3x3 (8) -> ReLU -> maxpool 2 -> conv 3x3 (16) -> ReLU -> maxpool 2
    -> F (8x8x16) -> global average pool -> z (16) -> linear -> logits (10)

All parameters live in one flat vector; layers are views into it.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, MissingCheckpoint, ShapeMismatch, VersionMismatch
from .sampling import SeedSpec

INPUT_SHAPE = (32, 32, 1)
N_CLASSES = 10
# images in [0, 1] are shifted so the gray background maps to zero and scaled
# so binary textures (0.2 / 0.8) land near +-1.2; without centring momentum SGD
# stays at chance on shape tasks, and without scaling it learns far slower
INPUT_OFFSET = 0.5
INPUT_SCALE = 4.0
CHECKPOINT_VERSION = 1
ARCHITECTURE = "conv8-conv16-gap-fc10"

LAYOUT: tuple[tuple[str, tuple[int, ...]], ...] = (
    ("conv1_w", (3, 3, 1, 8)),
    ("conv1_b", (8,)),
    ("conv2_w", (3, 3, 8, 16)),
    ("conv2_b", (16,)),
    ("fc_w", (16, 10)),
    ("fc_b", (10,)),
)
N_PARAMS = sum(math.prod(shape) for _, shape in LAYOUT)


class ModelParams:
    """Flat parameter vector with named, writable layer views."""

    def __init__(self, flat: np.ndarray | None = None, dtype=np.float32):
        if flat is None:
            flat = np.zeros(N_PARAMS, dtype=dtype)
        flat = np.ascontiguousarray(flat)
        if flat.shape != (N_PARAMS,):
            raise ShapeMismatch(f"expected {N_PARAMS} parameters, got {flat.shape}")
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in LAYOUT:
            size = math.prod(shape)
            self.views[name] = flat[offset : offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def copy(self) -> ModelParams:
        return ModelParams(self.flat.copy())

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.flat.astype(dtype))

    def __eq__(self, other) -> bool:
        return isinstance(other, ModelParams) and self.flat.dtype == other.flat.dtype and np.array_equal(self.flat, other.flat)

    def __repr__(self) -> str:
        return f"ModelParams(n={N_PARAMS}, dtype={self.flat.dtype})"

    @classmethod
    def zeros(cls, dtype=np.float32) -> ModelParams:
        return cls(np.zeros(N_PARAMS, dtype=dtype))

    @classmethod
    def init(cls, seed: int) -> ModelParams:
        """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
        params = cls.zeros(np.float32)
        for name, shape in LAYOUT:
            if name.endswith("_b"):
                continue
            fan_in = math.prod(shape[:-1])
            std = math.sqrt(2.0 / fan_in)
            rng = SeedSpec(seed, f"init:{name}").rng()
            values = [rng.normal() * std for _ in range(math.prod(shape))]
            params[name][...] = np.array(values, dtype=np.float64).reshape(shape)
        return params


@dataclass
class ForwardTrace:
    """Intermediate tensors kept for the backward pass."""

    x: np.ndarray
    cols1: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    pool1: np.ndarray
    arg1: np.ndarray
    cols2: np.ndarray
    pre2: np.ndarray
    act2: np.ndarray
    features: np.ndarray  # F, (N, 8, 8, 16)
    arg2: np.ndarray
    embedding: np.ndarray  # z, (N, 16)
    logits: np.ndarray  # (N, 10)


def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3 zero-padded patches: (N, H, W, C) -> (N, H, W, 9C), order (ky, kx, c)."""
    n, h, w, c = x.shape
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([p[:, ky : ky + h, kx : kx + w, :] for ky in range(3) for kx in range(3)], axis=-1)


def _col2im(dcols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = dcols.shape
    dp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for ky in range(3):
        for kx in range(3):
            dp[:, ky : ky + h, kx : kx + w, :] += dcols[..., k * c : (k + 1) * c]
            k += 1
    return dp[:, 1:-1, 1:-1, :]


def _maxpool(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/2 max pool; ``arg`` records the first maximal cell in (0,0),(0,1),(1,0),(1,1) order."""
    cells = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))
    arg = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        arg[cells[k] == out] = k
    return out, arg


def _unpool(dout: np.ndarray, arg: np.ndarray) -> np.ndarray:
    n, h2, w2, c = dout.shape
    dx = np.zeros((n, 2 * h2, 2 * w2, c), dtype=dout.dtype)
    for k, (oy, ox) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, oy::2, ox::2] = np.where(arg == k, dout, 0)
    return dx


def forward(params: ModelParams, images: np.ndarray) -> ForwardTrace:
    """Run a batch ``(N, 32, 32, 1)`` (or one image) through the network."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != INPUT_SHAPE:
        raise ShapeMismatch(f"expected input (N, 32, 32, 1), got {x.shape}")
    dtype = params.flat.dtype
    x = x.astype(dtype, copy=False)
    n = x.shape[0]

    cols1 = _im2col(x)
    pre1 = cols1 @ params["conv1_w"].reshape(9, 8) + params["conv1_b"]
    act1 = np.maximum(pre1, 0)
    pool1, arg1 = _maxpool(act1)

    cols2 = _im2col(pool1)
    pre2 = cols2 @ params["conv2_w"].reshape(72, 16) + params["conv2_b"]
    act2 = np.maximum(pre2, 0)
    feats, arg2 = _maxpool(act2)

    z = feats.reshape(n, 64, 16).mean(axis=1)
    logits = z @ params["fc_w"] + params["fc_b"]
    return ForwardTrace(x, cols1, pre1, act1, pool1, arg1, cols2, pre2, act2, feats, arg2, z, logits)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, label) -> float | np.ndarray:
    """``-log softmax(logits)[label]``; vectorises over a leading batch axis."""
    logits = np.asarray(logits, dtype=np.float64)
    lsm = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lsm[int(label)])
    label = np.asarray(label)
    return -lsm[np.arange(len(label)), label]


def backward(params: ModelParams, trace: ForwardTrace, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dlogits * logits)`` w.r.t. the flat parameter vector."""
    grad = ModelParams.zeros(params.flat.dtype)
    n = dlogits.shape[0]
    dlogits = dlogits.astype(params.flat.dtype, copy=False)

    grad["fc_w"][...] = trace.embedding.T @ dlogits
    grad["fc_b"][...] = dlogits.sum(axis=0)
    dz = dlogits @ params["fc_w"].T

    dfeats = np.broadcast_to((dz / 64)[:, None, None, :], trace.features.shape)
    dpre2 = _unpool(dfeats, trace.arg2) * (trace.pre2 > 0)
    dpre2_flat = dpre2.reshape(-1, 16)
    grad["conv2_w"][...] = (trace.cols2.reshape(-1, 72).T @ dpre2_flat).reshape(3, 3, 8, 16)
    grad["conv2_b"][...] = dpre2_flat.sum(axis=0)

    dcols2 = dpre2 @ params["conv2_w"].reshape(72, 16).T
    dpool1 = _col2im(dcols2, 8)
    dpre1 = _unpool(dpool1, trace.arg1) * (trace.pre1 > 0)
    dpre1_flat = dpre1.reshape(-1, 8)
    grad["conv1_w"][...] = (trace.cols1.reshape(-1, 9).T @ dpre1_flat).reshape(3, 3, 1, 8)
    grad["conv1_b"][...] = dpre1_flat.sum(axis=0)
    return grad.flat


def model_input(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] images to the network's zero-centred, rescaled input range."""
    images = np.asarray(images)
    dtype = images.dtype if images.dtype.kind == "f" else np.float32
    return (images - dtype.type(INPUT_OFFSET)) * dtype.type(INPUT_SCALE)


def loss_and_grad(params: ModelParams, images: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Weighted cross-entropy ``sum_i w_i CE_i`` (default: mean) and its gradient.

    ``images`` are in [0, 1]; they are centred before the forward pass.
    Returns ``(loss, grad_flat, trace, per_sample_ce)``.
    """
    trace = forward(params, model_input(images))
    labels = np.asarray(labels)
    n = len(labels)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    ce = cross_entropy(trace.logits, labels)
    loss = float(np.dot(weights, ce))
    probs = softmax(trace.logits.astype(np.float64))
    probs[np.arange(n), labels] -= 1.0
    dlogits = probs * np.asarray(weights, dtype=np.float64)[:, None]
    return loss, backward(params, trace, dlogits), trace, ce


def predict(model, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Logits for ``images``; ``model`` is ModelParams or any callable images -> logits."""
    images = np.asarray(images)
    if not isinstance(model, ModelParams):
        return np.asarray(model(images))
    out = [forward(model, model_input(images[i : i + batch_size])).logits for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES), dtype=model.flat.dtype)


def embed(model, images: np.ndarray, batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z, F)`` for a batch of images."""
    zs, fs = [], []
    for i in range(0, len(images), batch_size):
        tr = forward(model, model_input(images[i : i + batch_size]))
        zs.append(tr.embedding)
        fs.append(tr.features)
    return np.concatenate(zs), np.concatenate(fs)


# ---------------------------------------------------------------------------
# checkpoints: u32 header length | JSON header | f32 LE payload | SHA-256 trailer
# ---------------------------------------------------------------------------


def checkpoint_bytes(params: ModelParams, extra: dict | None = None) -> bytes:
    header = {
        "architecture": ARCHITECTURE,
        "format_version": CHECKPOINT_VERSION,
        "param_count": N_PARAMS,
        "dtype": "float32-le",
        "layout": [[name, list(shape)] for name, shape in LAYOUT],
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = params.flat.astype("<f4").tobytes()
    body = struct.pack("<I", len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def checkpoint_save(params: ModelParams, path: str | Path, extra: dict | None = None) -> str:
    """Write a checkpoint; returns its SHA-256 hex digest."""
    blob = checkpoint_bytes(params, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def checkpoint_load(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint {path} not found")
    blob = path.read_bytes()
    if len(blob) < 4 + 32:
        raise ChecksumMismatch(f"{path} is truncated ({len(blob)} bytes)")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise ChecksumMismatch(f"{path}: SHA-256 trailer does not match contents")
    (head_len,) = struct.unpack_from("<I", body)
    header = json.loads(body[4 : 4 + head_len].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint format {header.get('format_version')} != {CHECKPOINT_VERSION}")
    payload = body[4 + head_len :]
    n_payload = len(payload) // 4
    if header.get("param_count") != n_payload or len(payload) % 4:
        raise VersionMismatch(f"header param_count={header.get('param_count')} but payload holds {len(payload) / 4:g} values")
    if header.get("architecture") != ARCHITECTURE or n_payload != N_PARAMS:
        raise VersionMismatch(f"checkpoint architecture {header.get('architecture')} ({n_payload} params) is not {ARCHITECTURE}")
    return ModelParams(np.frombuffer(payload, dtype="<f4").astype(np.float32))
