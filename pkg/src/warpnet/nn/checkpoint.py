"""Binary checkpoint format.

Layout: magic "STNW", format version (u32 LE), a JSON metadata block
(u32 length + UTF-8 payload), then named tensors: u32 count followed by,
per tensor, u16 name length + name, u8 dtype code, u8 rank, u32 dims,
and the little-endian payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"STNW"
VERSION = 1

_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8"}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    meta_blob = json.dumps(meta or {}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", f.read(2))
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            dt = np.dtype(_DTYPES[code])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * dt.itemsize)
            if len(raw) != n * dt.itemsize:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return meta, tensors


def save_model(model, path, extra_meta: dict | None = None):
    meta = {"model": getattr(model, "spec", None)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    """Rebuild the model recorded in the checkpoint and load its weights."""
    from .build import build_model

    meta, tensors = load_checkpoint(path)
    spec = meta.get("model")
    if not spec:
        raise CheckpointError(f"{path}: checkpoint has no model spec metadata")
    model = build_model(**spec)
    model.load_state(tensors)
    return model, meta
