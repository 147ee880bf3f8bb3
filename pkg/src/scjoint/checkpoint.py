"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"JNT1"
    u64  metadata length M,  M bytes of UTF-8 JSON (sorted keys, compact)
    u64  table length N,     N bytes of UTF-8 JSON:
                             [{"name": str, "shape": [int], "offset": int}, ...]
    raw  float32 LE parameter data; ``offset`` is relative to the start of
         this section, entries are contiguous and in table order

The metadata carries the model config, task registry, step, seed and the job
PRNG state.  Parameters are stored as f32 and widened back to f64 on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes
from .model import JointModel, ModelConfig

__all__ = ["MAGIC", "CheckpointError", "encode", "decode", "save", "load", "load_model"]

MAGIC = b"JNT1"


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode(params: dict[str, np.ndarray], metadata: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    meta_b, table_b = _dumps(metadata), _dumps(table)
    return b"".join(
        [MAGIC, struct.pack("<Q", len(meta_b)), meta_b, struct.pack("<Q", len(table_b)), table_b, *chunks]
    )


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4
    try:
        (m,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        metadata = json.loads(data[pos : pos + m])
        pos += m
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        table = json.loads(data[pos : pos + n])
        pos += n
    except (struct.error, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    body = memoryview(data)[pos:]
    params = {}
    for row in table:
        count = int(np.prod(row["shape"], dtype=np.int64))
        start = row["offset"]
        if start + 4 * count > len(body):
            raise CheckpointError(f"truncated data for parameter {row['name']}")
        arr = np.frombuffer(body[start : start + 4 * count], dtype="<f4").reshape(row["shape"])
        params[row["name"]] = arr.astype(np.float64)
    return params, metadata


def save(path, model: JointModel, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["model_config"] = model.config.to_dict()
    meta["model_seed"] = model.seed
    meta["tasks"] = model.tasks
    atomic_write_bytes(path, encode(model.state_dict(), meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)


def load_model(path) -> tuple[JointModel, dict]:
    params, meta = load(path)
    model = JointModel(ModelConfig.from_dict(meta["model_config"]), seed=meta.get("model_seed", 0))
    model.load_state_dict(params)
    return model, meta
