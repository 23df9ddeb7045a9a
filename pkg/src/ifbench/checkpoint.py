"""Single-file checkpoint archive.

Layout::

    b"IFBCKPT1" | u64 header length | JSON header | payloads

The header holds free-form metadata plus, per array, its name, shape,
byte offset and byte count. Payloads are little-endian float32.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IFBCKPT1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> int:
    """Write ``arrays`` and ``meta``; returns the file size in bytes."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPE)
        entries.append(dict(name=name, shape=list(a.shape), offset=offset, nbytes=a.nbytes))
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(dict(meta=meta or {}, tensors=entries), sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path.stat().st_size


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=_DTYPE).reshape(e["shape"]).copy()
    return arrays, header["meta"]
