"""Binary checkpoints shared by every network in the package.

Layout (all integers little-endian)::

    b"TTD1"                      magic and format version
    u32  tensor count
    per tensor:
        u32  name length, then the UTF-8 name
        u32  ndim
        u64  extent, ndim times
        f64  data, row-major

Tensors are written in the order given and read back into a dict that
preserves it.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTD1"


def save_checkpoint(path, tensors: dict) -> None:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        key = str(name).encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a TTD1 checkpoint (magic {data[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated tensor name")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if pos + 8 * size > len(data):
            raise ValueError(f"{path}: truncated data for tensor {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out
