"""Versioned binary model files.

Layout (little-endian)::

    b"ACFMODEL"            8-byte magic
    uint32                 format version
    uint32                 header length H
    H bytes                UTF-8 JSON header (schema, digest, hyper, keys, ...)
    float64[2]             bias, bias accumulator
    float64[n, D]          latent vectors, rows in header key order
    float64[n, D]          AdaGrad accumulators (absent for snapshots)

Rows are written in canonical key order, so equal models give equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from acfilter.model import (
    FeatureSchema,
    Hyper,
    LatentFactorModel,
    ModelError,
    ModelSnapshot,
    _value_sort_key,
)

MAGIC = b"ACFMODEL"
FORMAT_VERSION = 1


class ModelFileError(ModelError):
    pass


def _canonical_rows(model) -> list[tuple]:
    return sorted(model.index.items(), key=lambda kv: (kv[0][0], _value_sort_key(kv[0][1])))


def model_to_bytes(model, include_meta: bool = True) -> bytes:
    """Serialize; ``include_meta=False`` leaves out run metadata (used for digests)."""
    is_snapshot = isinstance(model, ModelSnapshot)
    items = _canonical_rows(model)
    rows = np.array([r for _, r in items], dtype=np.int64)
    for (_, v), _r in items:
        if not isinstance(v, (str, int)) or isinstance(v, bool):
            raise ModelFileError(f"value id {v!r} is not a string or integer")
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "snapshot" if is_snapshot else "model",
        "schema": model.schema.to_dict(),
        "schema_digest": model.schema.digest(),
        "dim": model.dim,
        "hyper": asdict(model.hyper),
        "seed": model.seed,
        "bias_only": model.bias_only,
        "keys": [[f, v] for (f, v), _ in items],
        "meta": getattr(model, "meta", {}) if include_meta else {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    bias_acc = 0.0 if is_snapshot else model.bias_accum
    parts = [
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(head)),
        head,
        np.array([model.bias, bias_acc], dtype="<f8").tobytes(),
        np.ascontiguousarray(model.vectors[rows], dtype="<f8").tobytes(),
    ]
    if not is_snapshot:
        parts.append(np.ascontiguousarray(model.grad_accum[rows], dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes):
    if data[:8] != MAGIC:
        raise ModelFileError("not an acfilter model file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model format version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    schema = FeatureSchema.from_dict(header["schema"])
    if schema.digest() != header["schema_digest"]:
        raise ModelFileError("schema digest mismatch: file is corrupt or hand-edited")
    dim = int(header["dim"])
    keys = [(int(f), v) for f, v in header["keys"]]
    n = len(keys)
    off = 16 + hlen
    bias, bias_acc = np.frombuffer(data, dtype="<f8", count=2, offset=off)
    off += 16
    V = np.frombuffer(data, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
    off += 8 * n * dim
    model = LatentFactorModel(schema, dim, Hyper(**header["hyper"]), header["seed"],
                              bias=float(bias), bias_only=header["bias_only"])
    cap = max(64, n)
    model._V = np.zeros((cap, dim))
    model._G = np.zeros((cap, dim))
    model._V[:n] = V
    if header["kind"] == "model":
        G = np.frombuffer(data, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
        off += 8 * n * dim
        model._G[:n] = G
    if off != len(data):
        raise ModelFileError("trailing or missing bytes in model file")
    model._state[1] = float(bias_acc)
    model.keys = keys
    model.index = {k: i for i, k in enumerate(keys)}
    model._n = n
    model.meta = header.get("meta", {})
    if header["kind"] == "snapshot":
        return ModelSnapshot(model)
    return model


def save_model(model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
