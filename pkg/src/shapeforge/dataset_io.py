"""Little-endian SFDS dataset container plus JSON sidecar manifest.

Layout::

    b"SFDS" | u32 version | u32 count | u16 height | u16 width | u16 channels
    count x ( u16 shape_class | u16 texture_class
              | height*width*channels u8 pixels | height*width u8 mask )

Pixels are ``round(255 * intensity)``; mask bytes are 0 or 255.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, DataError, MissingDataset, VersionMismatch
from .synth import FORMAT_VERSION, N_CLASSES, Dataset, DatasetManifest

MAGIC = b"SFDS"
_HEADER = struct.Struct("<4sIIHHH")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def quantize(images: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_dataset(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    labels = np.empty((n, 2), dtype="<u2")
    labels[:, 0] = ds.shape_class
    labels[:, 1] = ds.texture_class
    pixels = quantize(ds.images).reshape(n, h * w * c)
    masks = np.where(ds.masks, 255, 0).astype(np.uint8).reshape(n, h * w)
    records = np.concatenate([labels.view(np.uint8).reshape(n, 4), pixels, masks], axis=1)
    return _HEADER.pack(MAGIC, FORMAT_VERSION, n, h, w, c) + records.tobytes()


def decode_dataset(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise DataError("file too short for an SFDS header")
    magic, version, n, h, w, c = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported SFDS version {version} (expected {FORMAT_VERSION})")
    rec = 4 + h * w * c + h * w
    body = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
    if body.size != n * rec:
        raise DataError(f"header declares {n} records ({n * rec} bytes) but body holds {body.size} bytes")
    body = body.reshape(n, rec)
    labels = body[:, :4].copy().view("<u2").reshape(n, 2).astype(np.int64)
    pixels = body[:, 4 : 4 + h * w * c].reshape(n, h, w, c)
    masks = body[:, 4 + h * w * c :].reshape(n, h, w) > 127
    return Dataset(
        images=(pixels.astype(np.float32) / np.float32(255.0)),
        shape_class=labels[:, 0],
        texture_class=labels[:, 1],
        masks=masks,
    )


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_dataset(ds: Dataset, path: str | Path, manifest: DatasetManifest | None = None) -> dict:
    """Write ``path`` and its ``<path>.json`` sidecar; returns the sidecar contents."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_dataset(ds)
    path.write_bytes(blob)
    manifest = manifest or ds.manifest
    if manifest is None:
        counts = np.bincount(ds.shape_class, minlength=N_CLASSES).tolist()
        manifest = DatasetManifest(split=path.stem, count=len(ds), class_counts=counts, mode="unknown", seed=0)
    if manifest.count != len(ds):
        raise DataError(f"manifest count {manifest.count} != {len(ds)} records")
    meta = manifest.to_dict()
    meta["file"] = path.name
    meta["sha256"] = hashlib.sha256(blob).hexdigest()
    manifest_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def read_dataset(path: str | Path, verify: bool = True) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise MissingDataset(f"dataset {path} not found")
    blob = path.read_bytes()
    meta = None
    side = manifest_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if verify and meta.get("sha256") and hashlib.sha256(blob).hexdigest() != meta["sha256"]:
            raise ChecksumMismatch(f"{path} does not match the SHA-256 in {side.name}")
    ds = decode_dataset(blob)
    if meta is not None:
        if meta["count"] != len(ds):
            raise DataError(f"manifest count {meta['count']} != {len(ds)} records in {path}")
        known = {"split", "count", "class_counts", "mode", "seed", "format_version"}
        ds.manifest = DatasetManifest(
            split=meta["split"],
            count=meta["count"],
            class_counts=meta["class_counts"],
            mode=meta["mode"],
            seed=meta["seed"],
            format_version=meta["format_version"],
            extra={k: v for k, v in meta.items() if k not in known | {"file", "sha256"}},
        )
    return ds
