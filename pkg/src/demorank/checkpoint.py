"""Binary checkpoint container for trained models.

Layout: 8-byte magic "DEMORANK", little-endian u32 format version, little-endian
u64 metadata length, UTF-8 JSON metadata, then the payload: raw little-endian
float32 tensor data in manifest order.  Metadata carries the model kind, its
dimensions, the hashing scheme, the config digest, and a tensor manifest of
(name, shape, byte offset into the payload).

Model parameters are kept on the float32 grid in memory, so save followed by
load reproduces scores bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .retriever import BiEncoder, EncoderConfig
from .reranker import CrossEncoder

MAGIC = b"DEMORANK"
VERSION = 1
HASH_SCHEME = "fnv1a64"


class CheckpointFormatError(ValueError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


def _pack(metadata: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    manifest = []
    payload = bytearray()
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += data
    meta = dict(metadata)
    meta["tensors"] = manifest
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = MAGIC + VERSION.to_bytes(4, "little") + len(meta_bytes).to_bytes(8, "little")
    return head + meta_bytes + bytes(payload)


def _unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic")
    version = int.from_bytes(blob[8:12], "little")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    meta_len = int.from_bytes(blob[12:20], "little")
    if len(blob) < 20 + meta_len:
        raise CheckpointFormatError("truncated metadata")
    try:
        meta = json.loads(blob[20:20 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"bad metadata: {exc}") from exc
    payload = blob[20 + meta_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in meta.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + 4 * count
        if start < 0 or end > len(payload):
            raise CheckpointFormatError(
                f"tensor {entry['name']!r} overruns payload ({start}:{end} of {len(payload)})")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
    return meta, tensors


def save_checkpoint(path: str | Path, metadata: dict,
                    tensors: list[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(_pack(metadata, tensors))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return _unpack(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Model adapters


def save_retriever(path, model: BiEncoder, config_digest: str = "") -> None:
    meta = {
        "kind": "bi_encoder",
        "vocab_buckets": model.config.vocab_buckets,
        "dim": model.config.dim,
        "hash": HASH_SCHEME,
        "config_digest": config_digest,
    }
    save_checkpoint(path, meta, [("embeddings", model.embeddings)])


def load_retriever(path) -> tuple[BiEncoder, dict]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "bi_encoder":
        raise CheckpointFormatError(f"expected a bi_encoder checkpoint, got {meta.get('kind')!r}")
    config = EncoderConfig(int(meta["vocab_buckets"]), int(meta["dim"]))
    emb = tensors["embeddings"]
    if emb.shape != (config.vocab_buckets, config.dim):
        raise CheckpointFormatError(f"embeddings shape {emb.shape} does not match metadata")
    return BiEncoder(config, emb), meta


def save_reranker(path, model: CrossEncoder, config_digest: str = "") -> None:
    meta = {
        "kind": "cross_encoder",
        "vocab_buckets": model.config.vocab_buckets,
        "dim": model.config.dim,
        "hidden": model.hidden,
        "hash": HASH_SCHEME,
        "config_digest": config_digest,
    }
    save_checkpoint(path, meta, [
        ("embeddings", model.embeddings),
        ("w1", model.w1), ("b1", model.b1), ("w2", model.w2), ("b2", model.b2),
    ])


def load_reranker(path) -> tuple[CrossEncoder, dict]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "cross_encoder":
        raise CheckpointFormatError(f"expected a cross_encoder checkpoint, got {meta.get('kind')!r}")
    config = EncoderConfig(int(meta["vocab_buckets"]), int(meta["dim"]))
    hidden = int(meta["hidden"])
    model = CrossEncoder(config, hidden, tensors["embeddings"], tensors["w1"],
                         tensors["b1"], tensors["w2"], tensors["b2"])
    if model.embeddings.shape != (config.vocab_buckets, config.dim):
        raise CheckpointFormatError("embeddings shape does not match metadata")
    if model.w1.shape != (hidden, 4 * config.dim):
        raise CheckpointFormatError("w1 shape does not match metadata")
    return model, meta
