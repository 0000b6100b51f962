"""Versioned binary checkpoint container.

Layout (all little-endian):
    magic   b"TTCK"
    version u32
    config  u64 length + UTF-8 JSON
    count   u32 number of named tensors
    tensors repeated: u16 name length, name bytes, array payload
            (dtype u8, rank u8, shape u64 per axis, raw data)

Tensors are written in sorted name order so identical state produces
identical bytes. Writes are atomic; malformed files raise
``CorruptCheckpointError`` carrying the byte offset of the failure.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .tensorio import TensorFormatError, atomic_write_bytes, decode_array, encode_array

MAGIC = b"TTCK"
VERSION = 1


class CorruptCheckpointError(TensorFormatError):
    pass


def save_checkpoint(path: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    config_blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<Q", len(config_blob)), config_blob,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        blob = name.encode()
        if len(blob) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(blob)))
        parts.append(blob)
        parts.append(encode_array(tensors[name]))
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    try:
        return _parse(buf)
    except TensorFormatError as e:
        raise CorruptCheckpointError(f"{path}: {e.args[0].rsplit(' (at byte', 1)[0]}",
                                     e.offset) from None


def _parse(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    off = 4
    if off + 4 > len(buf):
        raise TensorFormatError("truncated version field", off)
    (version,) = struct.unpack_from("<I", buf, off)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", off)
    off += 4
    if off + 8 > len(buf):
        raise TensorFormatError("truncated config length", off)
    (config_len,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if off + config_len > len(buf):
        raise TensorFormatError(f"config needs {config_len} bytes", off)
    try:
        config = json.loads(buf[off:off + config_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFormatError(f"config JSON invalid: {e}", off) from None
    off += config_len
    if off + 4 > len(buf):
        raise TensorFormatError("truncated tensor count", off)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 2 > len(buf):
            raise TensorFormatError("truncated tensor name length", off)
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + name_len > len(buf):
            raise TensorFormatError("truncated tensor name", off)
        name = buf[off:off + name_len].decode()
        off += name_len
        arr, off = decode_array(buf, off)
        tensors[name] = arr
    if off != len(buf):
        raise TensorFormatError(f"{len(buf) - off} trailing bytes", off)
    return config, tensors


def inspect_checkpoint(path: str) -> dict:
    """Version, config, and per-tensor shape/dtype/sha256 plus a file hash."""
    config, tensors = load_checkpoint(path)
    with open(path, "rb") as f:
        file_hash = hashlib.sha256(f.read()).hexdigest()
    entries = []
    for name in sorted(tensors):
        arr = tensors[name]
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "sha256": hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest(),
        })
    return {"version": VERSION, "config": config, "tensors": entries,
            "file_sha256": file_hash}


def file_sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
