"""Spatial-aware cross-attention: anchor queries over patches, gated into tokens.

Per tap layer, ``m`` anchor queries attend over positional-encoded patch
features (keys) and aggregate the raw patch features (values). Each global
token then picks up a gated, scaled sum of the anchor summaries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import ParameterStore, Tensor

POS_MODES = ("none", "learned_1d", "sin_1d", "learned_2d", "sin_2d", "rel_bias_2d")
ANCHOR_COUNTS = (1, 2, 4, 8, 16, 32)
INIT_STD = 0.02


@dataclass(frozen=True)
class ScaConfig:
    m: int = 4
    pos_mode: str = "learned_1d"
    value_uses_pos: bool = False
    alpha_init: float = 0.1

    def validate(self, num_patches: int) -> None:
        if self.pos_mode not in POS_MODES:
            raise ConfigError(f"unknown sca.pos_mode {self.pos_mode!r}; choose from {POS_MODES}")
        if not 1 <= self.m <= num_patches:
            raise ConfigError(f"sca.m={self.m} must lie in [1, N={num_patches}]")


@dataclass
class ScaLayer:
    layer: int
    anchors: Tensor  # (m, d)
    wg: Tensor  # (m, d)
    alpha: Tensor  # ()
    pos_mode: str
    grid: int
    pos_params: dict[str, Tensor]
    fixed_pos: np.ndarray | None = None
    value_uses_pos: bool = False

    @property
    def m(self) -> int:
        return self.anchors.shape[0]


@dataclass
class ScaOutput:
    attention: Tensor  # (B, m, N)
    anchor_features: Tensor  # (B, m, d)
    t_a: Tensor  # (B, d) enhanced
    t_n: Tensor


def prefix(layer: int) -> str:
    return f"sca.L{layer}"


def sinusoid_1d(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    freq = 1.0 / 10000.0 ** (2.0 * i / d)
    out = np.zeros((n, d))
    out[:, 0 : 2 * (d // 2) : 2] = np.sin(pos * freq)
    out[:, 1 : 2 * (d // 2) : 2] = np.cos(pos * freq)
    return out


def sinusoid_2d(grid: int, d: int) -> np.ndarray:
    half = d // 2
    rows = sinusoid_1d(grid, half)
    cols = sinusoid_1d(grid, d - half)
    r = np.repeat(rows, grid, axis=0)
    c = np.tile(cols, (grid, 1))
    return np.concatenate([r, c], axis=1)


def _row_col_onehots(grid: int) -> tuple[np.ndarray, np.ndarray]:
    n = grid * grid
    idx = np.arange(n)
    rows = np.zeros((n, grid))
    cols = np.zeros((n, grid))
    rows[idx, idx // grid] = 1.0
    cols[idx, idx % grid] = 1.0
    return rows, cols


def _relative_onehot(grid: int) -> np.ndarray:
    """(N, (2g-1)^2) one-hot of each patch's offset from the grid centre."""
    n = grid * grid
    span = 2 * grid - 1
    c = grid // 2
    out = np.zeros((n, span * span))
    for i in range(n):
        dr, dc = i // grid - c, i % grid - c
        out[i, (dr + grid - 1) * span + (dc + grid - 1)] = 1.0
    return out


def init_sca_layer(store: ParameterStore, layer: int, num_patches: int, dim: int, cfg: ScaConfig,
                   rng: np.random.Generator, dtype=np.float32) -> ScaLayer:
    cfg.validate(num_patches)
    grid = int(round(np.sqrt(num_patches)))
    p = prefix(layer)
    anchors = store.add(f"{p}.anchors", rng.normal(0, INIT_STD, (cfg.m, dim)).astype(dtype))
    pos_params: dict[str, Tensor] = {}
    fixed = None
    if cfg.pos_mode == "learned_1d":
        pos_params["epos"] = store.add(f"{p}.epos", rng.normal(0, INIT_STD, (num_patches, dim)).astype(dtype))
    elif cfg.pos_mode == "learned_2d":
        pos_params["epos_row"] = store.add(f"{p}.epos_row", rng.normal(0, INIT_STD, (grid, dim)).astype(dtype))
        pos_params["epos_col"] = store.add(f"{p}.epos_col", rng.normal(0, INIT_STD, (grid, dim)).astype(dtype))
    elif cfg.pos_mode == "rel_bias_2d":
        span = 2 * grid - 1
        pos_params["relbias"] = store.add(f"{p}.relbias", rng.normal(0, INIT_STD, (span * span,)).astype(dtype))
    elif cfg.pos_mode == "sin_1d":
        fixed = sinusoid_1d(num_patches, dim).astype(dtype)
    elif cfg.pos_mode == "sin_2d":
        fixed = sinusoid_2d(grid, dim).astype(dtype)
    wg = store.add(f"{p}.wg", rng.normal(0, INIT_STD, (cfg.m, dim)).astype(dtype))
    alpha = store.add(f"{p}.alpha", np.asarray(cfg.alpha_init, dtype=dtype))
    return ScaLayer(layer, anchors, wg, alpha, cfg.pos_mode, grid, pos_params, fixed, cfg.value_uses_pos)


def sca_layer_from_store(store: ParameterStore, layer: int, num_patches: int, cfg: ScaConfig) -> ScaLayer:
    """Rebuild a layer view over parameters already present in ``store``."""
    p = prefix(layer)
    grid = int(round(np.sqrt(num_patches)))
    dim = store[f"{p}.anchors"].shape[1]
    dtype = store[f"{p}.anchors"].dtype
    names = {"learned_1d": ["epos"], "learned_2d": ["epos_row", "epos_col"], "rel_bias_2d": ["relbias"]}
    pos_params = {n: store[f"{p}.{n}"] for n in names.get(cfg.pos_mode, [])}
    fixed = None
    if cfg.pos_mode == "sin_1d":
        fixed = sinusoid_1d(num_patches, dim).astype(dtype)
    elif cfg.pos_mode == "sin_2d":
        fixed = sinusoid_2d(grid, dim).astype(dtype)
    return ScaLayer(layer, store[f"{p}.anchors"], store[f"{p}.wg"], store[f"{p}.alpha"], cfg.pos_mode,
                    grid, pos_params, fixed, cfg.value_uses_pos)


def positional_encoding(layer: ScaLayer, dtype) -> Tensor | None:
    """The (N, d) additive key encoding, or None when the mode has none."""
    mode = layer.pos_mode
    if mode == "learned_1d":
        return layer.pos_params["epos"]
    if mode in ("sin_1d", "sin_2d"):
        return Tensor(layer.fixed_pos.astype(dtype, copy=False))
    if mode == "learned_2d":
        rows, cols = _row_col_onehots(layer.grid)
        r = nx.matmul(Tensor(rows.astype(dtype)), layer.pos_params["epos_row"])
        c = nx.matmul(Tensor(cols.astype(dtype)), layer.pos_params["epos_col"])
        return nx.add(r, c)
    return None


def _logit_bias(layer: ScaLayer, dtype) -> Tensor | None:
    if layer.pos_mode != "rel_bias_2d":
        return None
    onehot = Tensor(_relative_onehot(layer.grid).astype(dtype))
    table = nx.reshape(layer.pos_params["relbias"], (-1, 1))
    return nx.reshape(nx.matmul(onehot, table), (1, 1, -1))


def attend(layer: ScaLayer, patches: Tensor) -> tuple[Tensor, Tensor]:
    """Anchor cross-attention over patches (N, d) or (B, N, d); returns (A, U)."""
    single = patches.ndim == 2
    if single:
        patches = nx.reshape(patches, (1,) + patches.shape)
    b, n, d = patches.shape
    epos = positional_encoding(layer, patches.dtype)
    if epos is not None and epos.shape != (n, d):
        raise DimensionError(f"patch features {patches.shape} do not match positional encoding {epos.shape}")
    keys = patches if epos is None else nx.add(patches, nx.expand(epos, (b, n, d)))
    logits = nx.scale(nx.matmul(layer.anchors, nx.transpose(keys, (0, 2, 1))), 1.0 / np.sqrt(d))
    bias = _logit_bias(layer, patches.dtype)
    if bias is not None:
        if bias.shape[-1] != n:
            raise DimensionError(f"relative bias covers {bias.shape[-1]} patches, got {n}")
        logits = nx.add(logits, nx.expand(bias, logits.shape))
    att = nx.softmax(logits)
    values = keys if layer.value_uses_pos else patches
    u = nx.matmul(att, values)
    if single:
        return nx.reshape(att, att.shape[1:]), nx.reshape(u, u.shape[1:])
    return att, u


def gate(layer: ScaLayer, t: Tensor) -> Tensor:
    """sigmoid(W_g t) for t of shape (d,) or (B, d)."""
    return nx.sigmoid(nx.matmul(nx.reshape(t, (-1, t.shape[-1])), nx.transpose(layer.wg)).reshape(
        t.shape[:-1] + (layer.m,)))


def enhance(layer: ScaLayer, t: Tensor, u: Tensor, g: Tensor) -> Tensor:
    """t + alpha * sum_i g_i a_i, batched over a leading axis when present."""
    if t.ndim == 1:
        mixed = nx.reshape(nx.matmul(nx.reshape(g, (1, -1)), u), t.shape)
    else:
        mixed = nx.reshape(nx.matmul(nx.reshape(g, (g.shape[0], 1, -1)), u), t.shape)
    return nx.add(t, nx.mul(layer.alpha, mixed))


def apply(layer: ScaLayer, patches: Tensor, t_a: Tensor, t_n: Tensor) -> ScaOutput:
    att, u = attend(layer, patches)
    ea = enhance(layer, t_a, u, gate(layer, t_a))
    en = enhance(layer, t_n, u, gate(layer, t_n))
    return ScaOutput(att, u, ea, en)
