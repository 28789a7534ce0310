"""Portable binary checkpoints.

Layout (all integers unsigned 64-bit little-endian, floats IEEE-754 float64 LE)::

    magic   12 bytes  b"RSLLM-CKPT\\x00\\x00"
    version  4 bytes  uint32 LE
    count            number of records
    per record:
        name length, UTF-8 name bytes, rank, dims[rank], values[prod(dims)]
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RSLLM-CKPT\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")  # keeps 0-d values 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 24 or buf[:12] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 12)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", buf, 16)
    pos = 24
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
