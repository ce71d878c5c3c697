"""Flat binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"PIBW"
    version u32      currently 1
    count   u32      number of tensors
    then per tensor:
        name_len u32, name (UTF-8, name_len bytes)
        rank     u32, dims rank x u64
        data     prod(dims) float32, little-endian

Tensors are written in the order given, which the model's parameter
traversal keeps stable, so identical states produce identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PIBW"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, named_arrays) -> None:
    items = list(named_arrays.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _take(buf: memoryview, pos: int, n: int):
    if pos + n > len(buf):
        raise CheckpointError("truncated checkpoint")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        buf = memoryview(f.read())
    chunk, pos = _take(buf, 0, 4)
    if bytes(chunk) != MAGIC:
        raise CheckpointError("not a PIBW checkpoint")
    chunk, pos = _take(buf, pos, 8)
    version, count = struct.unpack("<II", chunk)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, pos = _take(buf, pos, 4)
        (name_len,) = struct.unpack("<I", chunk)
        chunk, pos = _take(buf, pos, name_len)
        name = bytes(chunk).decode("utf-8")
        chunk, pos = _take(buf, pos, 4)
        (rank,) = struct.unpack("<I", chunk)
        chunk, pos = _take(buf, pos, 8 * rank)
        dims = struct.unpack(f"<{rank}Q", chunk)
        size = 1
        for d in dims:
            size *= d
        chunk, pos = _take(buf, pos, 4 * size)
        arr = np.frombuffer(chunk, dtype="<f4").reshape(dims).astype(np.float32)
        out[name] = arr
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return out
