"""Frozen toy Vision Transformer with two inserted learnable global tokens.

The encoder input sequence is ``[t_a, t_n, t_c, p_1 ... p_N]``: anomaly token,
normal token, class token, then patch embeddings. Hidden states are tapped at
the output of selected blocks (post-residual, no final norm).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, LoadError
from .numerics import ParameterStore, Tensor

INIT_STD = 0.02
NUM_PREFIX = 3  # t_a, t_n, t_c
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 8
    dim: int = 64
    heads: int = 4
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(x) for x in self.tap_layers))
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        L = self.tap_layers
        if not L:
            raise ConfigError("tap_layers must be non-empty")
        if list(L) != sorted(set(L)) or L[0] < 1 or L[-1] > self.depth:
            raise ConfigError(f"tap_layers {L} must be strictly ascending within [1, {self.depth}]")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def deepest(self) -> int:
        return self.tap_layers[-1]


def weight_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every frozen tensor, in draw order."""
    d = cfg.dim
    shapes = {
        "backbone.patch_embed.weight": (d, cfg.patch_dim),
        "backbone.patch_embed.bias": (d,),
        "backbone.cls_token": (d,),
        "backbone.pos_embed": (1 + cfg.num_patches, d),
    }
    for i in range(cfg.depth):
        p = f"backbone.blocks.{i}."
        shapes.update(
            {
                p + "ln1.weight": (d,),
                p + "ln1.bias": (d,),
                p + "attn.qkv.weight": (3 * d, d),
                p + "attn.qkv.bias": (3 * d,),
                p + "attn.proj.weight": (d, d),
                p + "attn.proj.bias": (d,),
                p + "ln2.weight": (d,),
                p + "ln2.bias": (d,),
                p + "mlp.fc1.weight": (4 * d, d),
                p + "mlp.fc1.bias": (4 * d,),
                p + "mlp.fc2.weight": (d, 4 * d),
                p + "mlp.fc2.bias": (d,),
            }
        )
    return shapes


class FrozenBackbone:
    """Immutable weight set; tensors never require gradients."""

    def __init__(self, cfg: ViTConfig, weights: dict[str, np.ndarray]):
        self.cfg = cfg
        expected = weight_shapes(cfg)
        missing = [k for k in expected if k not in weights]
        if missing:
            raise LoadError(f"backbone weights missing tensor {missing[0]}")
        self.tensors: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(weights[name])
            if arr.shape != shape:
                raise LoadError(f"backbone tensor {name}: expected shape {shape}, got {arr.shape}")
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            self.tensors[name] = Tensor(arr, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def checksum(self) -> int:
        return nx.checksum(t.data for t in self.tensors.values())

    def astype(self, dtype) -> "FrozenBackbone":
        return FrozenBackbone(self.cfg, {k: v.astype(dtype) for k, v in self.arrays().items()})


def init_frozen_backbone(cfg: ViTConfig, weights: dict[str, np.ndarray] | None = None,
                         dtype=np.float32) -> FrozenBackbone:
    """Draw the toy weights from ``cfg.seed``, or wrap externally supplied ones.

    Linear weights, embeddings and the class token are N(0, 0.02); biases start
    at zero and layer norms at unit scale.
    """
    if weights is not None:
        return FrozenBackbone(cfg, {k: np.asarray(v, dtype=dtype) for k, v in weights.items()})
    rng = np.random.default_rng(cfg.seed)
    drawn = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith(("ln1.weight", "ln2.weight")):
            arr = np.ones(shape)
        elif name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        drawn[name] = arr.astype(dtype)
    return FrozenBackbone(cfg, drawn)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (C, H, W) or (B, C, H, W) into row-major, channel-major flattened patches."""
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4:
        raise DimensionError(f"patchify expects (C,H,W) or (B,C,H,W), got {img.shape}")
    b, c, h, w = img.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = img.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return out[0] if single else out


@dataclass
class TokenPair:
    t_a: Tensor
    t_n: Tensor
    pos_a: Tensor
    pos_n: Tensor


def init_tokens(store: ParameterStore, cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> TokenPair:
    d = cfg.dim
    names = ("token.anomaly", "token.normal", "token.pos_anomaly", "token.pos_normal")
    for name in names:
        store.add(name, rng.normal(0.0, INIT_STD, size=d).astype(dtype))
    return tokens_from_store(store)


def tokens_from_store(store: ParameterStore) -> TokenPair:
    return TokenPair(store["token.anomaly"], store["token.normal"],
                     store["token.pos_anomaly"], store["token.pos_normal"])


@dataclass
class LayerTap:
    layer: int
    patches: Tensor  # (B, N, d)
    t_a: Tensor  # (B, d)
    t_n: Tensor
    t_c: Tensor


@dataclass
class BackboneTap:
    layers: list[LayerTap] = field(default_factory=list)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> LayerTap:
        return self.layers[i]


def _block(x: Tensor, bb: FrozenBackbone, i: int, heads: int) -> Tensor:
    p = f"backbone.blocks.{i}."
    b, s, d = x.shape
    dh = d // heads
    h = nx.layer_norm(x, bb[p + "ln1.weight"], bb[p + "ln1.bias"])
    qkv = nx.linear(h, bb[p + "attn.qkv.weight"], bb[p + "attn.qkv.bias"])
    qkv = nx.transpose(nx.reshape(qkv, (b, s, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)))
    o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (b, s, d))
    x = nx.add(x, nx.linear(o, bb[p + "attn.proj.weight"], bb[p + "attn.proj.bias"]))
    h = nx.layer_norm(x, bb[p + "ln2.weight"], bb[p + "ln2.bias"])
    h = nx.gelu(nx.linear(h, bb[p + "mlp.fc1.weight"], bb[p + "mlp.fc1.bias"]))
    return nx.add(x, nx.linear(h, bb[p + "mlp.fc2.weight"], bb[p + "mlp.fc2.bias"]))


def embed_patches(images: np.ndarray, bb: FrozenBackbone) -> np.ndarray:
    """Constant (frozen) part of the input sequence: [t_c, p_1..p_N] with positions."""
    cfg = bb.cfg
    dtype = bb["backbone.pos_embed"].dtype
    patches = patchify((np.asarray(images, dtype=dtype) - PIXEL_MEAN) / PIXEL_STD, cfg.patch_size)
    emb = patches @ bb["backbone.patch_embed.weight"].data.T + bb["backbone.patch_embed.bias"].data
    b = emb.shape[0]
    cls = np.broadcast_to(bb["backbone.cls_token"].data, (b, 1, cfg.dim))
    seq = np.concatenate([cls, emb], axis=1) + bb["backbone.pos_embed"].data
    return seq.astype(dtype, copy=False)


def encode(images: np.ndarray, tokens: TokenPair, bb: FrozenBackbone) -> BackboneTap:
    """Run the frozen encoder on a batch (B,3,H,W) (or one image (3,H,W))."""
    cfg = bb.cfg
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"expected images of shape (B, 3, {cfg.image_size}, {cfg.image_size}), got {images.shape}")
    b = images.shape[0]
    d = cfg.dim
    rest = Tensor(embed_patches(images, bb))
    ta = nx.reshape(nx.add(tokens.t_a, tokens.pos_a), (1, 1, d))
    tn = nx.reshape(nx.add(tokens.t_n, tokens.pos_n), (1, 1, d))
    x = nx.concat([nx.expand(ta, (b, 1, d)), nx.expand(tn, (b, 1, d)), rest], axis=1)
    taps = BackboneTap()
    wanted = set(cfg.tap_layers)
    for i in range(cfg.depth):
        x = _block(x, bb, i, cfg.heads)
        layer = i + 1
        if layer in wanted:
            taps.layers.append(LayerTap(layer=layer, patches=x[:, NUM_PREFIX:, :],
                                        t_a=x[:, 0, :], t_n=x[:, 1, :], t_c=x[:, 2, :]))
    return taps
