"""Versioned binary container for named parameter arrays.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"HSODCKPT"
    offset 8   u32       format version (1)
    offset 12  u64       header length N
    offset 20  N bytes   UTF-8 JSON header:
                         {"kind": str, "config": {...},
                          "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    offset 20+N          tensor payload; ``offset`` is relative to this point,
                         arrays are C-ordered with explicit little-endian dtypes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import DataError

MAGIC = b"HSODCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict | None = None,
                    kind: str = "") -> Path:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config or {}, "tensors": table},
                        sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Return ``(arrays, config, kind)``."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    base = _PREFIX.size + hlen
    if len(data) < base:
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[_PREFIX.size:base])
    except ValueError as exc:
        raise DataError(f"{path}: corrupt checkpoint header ({exc})") from None
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        if start + t["nbytes"] > len(data):
            raise DataError(f"{path}: truncated payload for {t['name']!r}")
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=np.dtype(t["dtype"]), count=count, offset=start)
        arrays[t["name"]] = arr.reshape(tuple(t["shape"])).copy()
    return arrays, header["config"], header["kind"]
