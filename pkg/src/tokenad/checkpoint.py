"""Checkpoint container.

Layout (little-endian)::

    b"VADC" | u32 version=1 | u32 count |
    count x ( u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | f32 data[prod(dims)] ) |
    u32 crc32(all preceding bytes)

Names are namespaced ``backbone.*`` (frozen), ``param.*`` (trainable) and
``meta.*`` (run metadata).
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"VADC"
VERSION = 1


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 0xFF:
            raise ValueError(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (file is corrupted)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if off + 4 * n > len(body):
                raise CheckpointError(f"tensor {name} runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} trailing bytes after last tensor")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def text_to_tensor(text: str) -> np.ndarray:
    """Store UTF-8 text losslessly as float32 byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
