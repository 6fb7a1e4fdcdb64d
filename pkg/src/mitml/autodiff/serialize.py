"""Binary tensor format: b"MTNS", u8 rank, rank x u32 LE dims, row-major f64 LE payload."""

from __future__ import annotations

import struct

import numpy as np

from mitml.autodiff.tensor import Tensor

MAGIC = b"MTNS"


class FormatError(ValueError):
    pass


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim > 255:
        raise FormatError("rank does not fit in u8")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def read_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad tensor magic at byte {offset}")
    (rank,) = struct.unpack_from("<B", buf, offset + 4)
    pos = offset + 5
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
    return arr, end


def tensor_from_bytes(buf: bytes) -> Tensor:
    arr, end = read_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor")
    return Tensor(arr)
