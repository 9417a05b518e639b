"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import LoadError


def _header(kind: bytes, width: int, height: int) -> bytes:
    return kind + b"\n" + f"{width} {height}\n255\n".encode("ascii")


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is (3, H, W) float in [0, 1] or uint8."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs (3, H, W), got {img.shape}")
    data = _to_uint8(img).transpose(1, 2, 0)
    Path(path).write_bytes(_header(b"P6", data.shape[1], data.shape[0]) + data.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs (H, W), got {img.shape}")
    data = _to_uint8(img)
    Path(path).write_bytes(_header(b"P5", data.shape[1], data.shape[0]) + data.tobytes())


def _to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return np.ascontiguousarray(img)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise LoadError("truncated netpbm header")
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def read_netpbm(path) -> np.ndarray:
    """Returns uint8 (H, W) for P5 and (3, H, W) for P6."""
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), start = _tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise LoadError(f"{path}: malformed netpbm header") from exc
    if magic not in (b"P5", b"P6"):
        raise LoadError(f"{path}: unsupported netpbm type {magic!r}")
    if maxval != 255:
        raise LoadError(f"{path}: only 8-bit images (maxval 255) are supported")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = buf[start : start + n]
    if len(raster) != n:
        raise LoadError(f"{path}: expected {n} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w).copy()
    return arr.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_image(path) -> np.ndarray:
    """Float32 (3, H, W) in [0, 1]; grayscale files are replicated to three channels."""
    arr = read_netpbm(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def read_mask(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim == 3:
        arr = arr.max(axis=0)
    return (arr > 0).astype(np.uint8)
