"""The ``ACVAE1`` flat container used for checkpoints and data caches.

Layout: 6-byte magic, 8-byte little-endian header length, UTF-8 JSON
header, then each array's raw little-endian bytes in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

MAGIC = b"ACVAE1"


class ContainerError(ValueError):
    pass


def dumps(arrays: Dict[str, np.ndarray], meta: Dict[str, Any] | None = None) -> bytes:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(le.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def loads(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if data[:len(MAGIC)] != MAGIC:
        raise ContainerError("not an ACVAE1 container (bad magic or version)")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise ContainerError("truncated container header")
    (hlen,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    if len(data) < off + hlen:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(data[off:off + hlen].decode())
    except ValueError as exc:
        raise ContainerError(f"corrupt container header: {exc}") from None
    off += hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if len(data) < off + n:
            raise ContainerError(f"truncated container: array {e['name']!r} is incomplete")
        arrays[e["name"]] = np.frombuffer(data[off:off + n], dtype=dt).reshape(tuple(e["shape"])).copy()
        off += n
    if off != len(data):
        raise ContainerError("trailing bytes after last array")
    return arrays, header["meta"]


def save(path, arrays: Dict[str, np.ndarray], meta: Dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    return loads(Path(path).read_bytes())
