"""Binary tensor dump: ``SPKT`` magic, u8 version, u8 rank, u32 extents, float32 payload (all LE)."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

MAGIC = b"SPKT"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def dumps(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim > 255:
        raise TensorFormatError(f"rank {arr.ndim} does not fit in one byte")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write(stream: BinaryIO, t) -> None:
    stream.write(dumps(t))


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor record: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def read(stream: BinaryIO) -> np.ndarray:
    """Read one tensor record and return it as a float32 array."""
    magic = _read_exact(stream, 4, "magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<BB", _read_exact(stream, 2, "header"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "extents"))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(stream, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def loads(buf: bytes) -> np.ndarray:
    import io
    return read(io.BytesIO(buf))
