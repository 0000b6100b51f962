"""Little-endian binary array encoding shared by corpus files and checkpoints.

Array payload layout: dtype code (u8), rank (u8), shape (u64 per axis),
raw array bytes. Standalone array files prepend the magic ``TTEN``.
All writes are atomic (temp file + rename) so readers never observe a
truncated artifact under the final name.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np


class TensorFormatError(ValueError):
    """Malformed binary artifact; ``offset`` locates the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


ARRAY_MAGIC = b"TTEN"

_CODE_TO_DTYPE = {1: "<f4", 2: "<f8", 3: "<i8"}
_KIND_TO_CODE = {("f", 4): 1, ("f", 8): 2, ("i", 8): 3}


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_CODE:
        raise TypeError(f"unsupported array dtype {arr.dtype}")
    code = _KIND_TO_CODE[key]
    arr = np.ascontiguousarray(arr.astype(_CODE_TO_DTYPE[code], copy=False))
    header = struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + arr.tobytes()


def decode_array(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    """Decode one array payload starting at ``offset``; returns (array, end)."""
    if offset + 2 > len(buf):
        raise TensorFormatError("truncated array header", offset)
    code, rank = struct.unpack_from("<BB", buf, offset)
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unknown dtype code {code}", offset)
    offset += 2
    if offset + 8 * rank > len(buf):
        raise TensorFormatError("truncated shape", offset)
    shape = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
    offset += 8 * rank
    dtype = np.dtype(_CODE_TO_DTYPE[code])
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    if rank == 0:
        nbytes = dtype.itemsize
    if offset + nbytes > len(buf):
        raise TensorFormatError(
            f"array data needs {nbytes} bytes, only {len(buf) - offset} remain", offset
        )
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype).reshape(shape)
    return arr.copy(), offset + nbytes


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_array(path: str, arr: np.ndarray) -> None:
    atomic_write_bytes(path, ARRAY_MAGIC + encode_array(arr))


def load_array(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != ARRAY_MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}, expected {ARRAY_MAGIC!r}", 0)
    arr, end = decode_array(buf, 4)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after array", end)
    return arr
