"""Binary checkpoint container ("KCKP").

Layout (little-endian): magic, u32 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, u32 extents, float64 payload; a
trailing u64 step counter closes the file. Optimizer moments are stored as
``opt.m.<name>`` and ``opt.v.<name>``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"KCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors: "OrderedDict[str, np.ndarray]", step: int) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    parts.append(struct.pack("<Q", step))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", int]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    (step,) = struct.unpack("<Q", take(8))
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes at byte {pos}")
    return out, step
