"""Binary checkpoint container.

Layout (little-endian)::

    magic     4 bytes  b"DFSC"
    version   u16      1
    meta_len  u32
    meta      UTF-8 JSON: free-form metadata plus an ``entries`` list of
              {name, shape} in payload order
    payload   every entry as contiguous 32-bit floats
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DFSC"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = list(tensors)
    doc = dict(meta or {})
    doc["entries"] = [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names]
    blob = json.dumps(doc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, meta_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _HEAD.size + meta_len
    try:
        meta = json.loads(raw[_HEAD.size : start].decode())
        entries = meta.pop("entries")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as err:
        raise CheckpointError(f"{path}: malformed metadata block ({err})") from None
    tensors = {}
    offset = start
    for entry in entries:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload truncated at entry {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, meta


def model_state(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_model_state(model, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy matching parameters into ``model``; returns the names that were skipped."""
    skipped = []
    for name, p in model.named_parameters():
        arr = state.get(name)
        if arr is None or arr.shape != p.shape:
            if strict:
                got = None if arr is None else arr.shape
                raise CheckpointError(f"parameter {name}: expected shape {p.shape}, checkpoint has {got}")
            skipped.append(name)
            continue
        p.data = arr.astype(p.dtype, copy=True)
    return skipped
