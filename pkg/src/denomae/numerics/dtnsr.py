"""DTNSR v1 tensor files.

Layout: 8-byte magic ``DTNSR1\\0\\0``, little-endian u32 rank, ``rank`` u64
dims, then float32 little-endian data in row-major order.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"DTNSR1\x00\x00"


class TensorFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote rank 0
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    arr, used = decode_prefix(buf)
    if used != len(buf):
        raise TensorFormatError(f"{len(buf) - used} trailing bytes after tensor payload")
    return arr


def decode_prefix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset:offset + 8] != MAGIC:
        raise TensorFormatError("bad magic, not a DTNSR v1 tensor")
    pos = offset + 8
    if len(buf) < pos + 4:
        raise TensorFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 8 * rank:
        raise TensorFormatError("truncated shape")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 4 * n
    if len(buf) < end:
        raise TensorFormatError(f"payload truncated: need {4 * n} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32)
    return data.reshape(shape), end


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_to(fh: BinaryIO, array: np.ndarray) -> int:
    blob = encode(array)
    fh.write(blob)
    return len(blob)
