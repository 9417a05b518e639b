"""Patch recalibration, cosine-contrast maps, multi-layer fusion and top-k scoring."""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import ParameterStore, Tensor


@dataclass
class SafLayer:
    layer: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def prefix(layer: int) -> str:
    return f"saf.L{layer}"


def init_saf_layer(store: ParameterStore, layer: int, dim: int, rng: np.random.Generator,
                   dtype=np.float32) -> SafLayer:
    # hidden width equals the input width
    std = 1.0 / np.sqrt(dim)
    p = prefix(layer)
    w1 = store.add(f"{p}.w1", rng.normal(0, std, (dim, dim)).astype(dtype))
    b1 = store.add(f"{p}.b1", np.zeros(dim, dtype=dtype))
    w2 = store.add(f"{p}.w2", rng.normal(0, std, (dim, dim)).astype(dtype))
    b2 = store.add(f"{p}.b2", np.zeros(dim, dtype=dtype))
    return SafLayer(layer, w1, b1, w2, b2)


def saf_layer_from_store(store: ParameterStore, layer: int) -> SafLayer:
    p = prefix(layer)
    return SafLayer(layer, store[f"{p}.w1"], store[f"{p}.b1"], store[f"{p}.w2"], store[f"{p}.b2"])


def recalibrate(layer: SafLayer, patches: Tensor) -> Tensor:
    """W2 gelu(W1 p + b1) + b2, row-wise."""
    return nx.linear(nx.gelu(nx.linear(patches, layer.w1, layer.b1)), layer.w2, layer.b2)


def patch_scores(patches: Tensor, t_a: Tensor, t_n: Tensor) -> Tensor:
    """cos(p, t_a) - cos(p, t_n) for every patch row.

    Shapes: patches (N, d) with tokens (d,), or patches (B, N, d) with tokens (B, d).
    """
    pbar = nx.l2_normalize(patches, name="recalibrated patch")
    abar = nx.l2_normalize(t_a, name="anomaly token")
    nbar = nx.l2_normalize(t_n, name="normal token")
    diff = nx.sub(abar, nbar)
    if patches.ndim == 2:
        return nx.reshape(nx.matmul(pbar, nx.reshape(diff, (-1, 1))), (patches.shape[0],))
    b, n, d = patches.shape
    return nx.reshape(nx.matmul(pbar, nx.reshape(diff, (b, d, 1))), (b, n))


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) corner-aligned linear interpolation weights."""
    if src < 1 or dst < 1:
        raise DimensionError(f"cannot interpolate {src} -> {dst}")
    out = np.zeros((dst, src))
    if src == 1:
        out[:, 0] = 1.0
        return out
    if dst == 1:
        out[0, 0] = 1.0
        return out
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    out[np.arange(dst), lo] = 1.0 - frac
    out[np.arange(dst), lo + 1] += frac
    return out


@functools.lru_cache(maxsize=64)
def _interp_constant(src: int, dst: int, dtype: str, transpose: bool) -> np.ndarray:
    m = interpolation_matrix(src, dst)
    m = np.ascontiguousarray(m.T if transpose else m, dtype=dtype)
    m.flags.writeable = False
    return m


def upsample_bilinear(maps: Tensor, target: tuple[int, int]) -> Tensor:
    """Corner-aligned bilinear resize of (h, w) or (B, h, w) maps."""
    th, tw = target
    if th < 1 or tw < 1:
        raise DimensionError(f"zero-size upsampling target {target}")
    h, w = maps.shape[-2:]
    ry = Tensor(_interp_constant(h, th, maps.dtype.str, False))
    rxt = Tensor(_interp_constant(w, tw, maps.dtype.str, True))
    return nx.matmul(nx.matmul(ry, maps), rxt)


def fuse(maps: Sequence[Tensor], target: tuple[int, int]) -> Tensor:
    if not maps:
        raise ConfigError("cannot fuse an empty set of layer maps")
    out = upsample_bilinear(maps[0], target)
    for m in maps[1:]:
        out = nx.add(out, upsample_bilinear(m, target))
    return out


def topk_count(height: int, width: int) -> int:
    return max(1, int(np.floor(0.01 * height * width)))


def image_score(fused: Tensor) -> tuple[Tensor, int]:
    """Mean of the top 1% pixels of (H, W) or (B, H, W) maps."""
    h, w = fused.shape[-2:]
    k = topk_count(h, w)
    flat = nx.reshape(fused, fused.shape[:-2] + (h * w,))
    return nx.topk_mean(flat, k), k


def normalize_heatmap(heat: np.ndarray) -> np.ndarray:
    """Per-image min-max to uint8 [0, 255]; a flat map becomes all zeros."""
    heat = np.asarray(heat, dtype=np.float64)
    lo, hi = heat.min(), heat.max()
    if not hi > lo:
        return np.zeros(heat.shape, dtype=np.uint8)
    return np.round((heat - lo) / (hi - lo) * 255.0).astype(np.uint8)
