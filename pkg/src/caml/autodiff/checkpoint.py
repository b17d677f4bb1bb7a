"""Binary parameter checkpoints.

Layout (little-endian)::

    b"CAMLCKPT" | u32 count | count x (u32 name_len | name utf-8 |
                                       u32 rank | u32 extents[rank] |
                                       f32 payload, C order)

Tensors are written in the mapping's iteration order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from caml.autodiff.tensor import Tensor

MAGIC = b"CAMLCKPT"


class CheckpointError(ValueError):
    pass


def dumps(params) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        value = t.value if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> dict:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return out


def save(path, params) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict:
    return loads(Path(path).read_bytes())
