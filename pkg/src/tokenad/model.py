"""Full detector: frozen encoder taps -> SCA token enhancement + SAF patches -> maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bbmod
from . import numerics as nx
from . import sca as scamod
from . import scoring
from .backbone import FrozenBackbone, ViTConfig
from .numerics import ParameterStore, Tensor
from .sca import ScaConfig


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    sca: ScaConfig = field(default_factory=ScaConfig)
    sca_enabled: bool = True
    saf_enabled: bool = True


@dataclass
class LayerOutput:
    layer: int
    score_map: Tensor  # (B, h, w)
    t_a: Tensor  # (B, d) tokens used for scoring (enhanced when SCA is on)
    t_n: Tensor
    raw_t_a: Tensor
    raw_t_n: Tensor
    attention: Tensor | None = None


@dataclass
class ModelOutput:
    layers: list[LayerOutput]
    fused: Tensor  # (B, H, W)
    score: Tensor  # (B,)
    k: int

    def layer_maps(self) -> list[Tensor]:
        return [lo.score_map for lo in self.layers]

    @property
    def deepest(self) -> LayerOutput:
        return self.layers[-1]


class AnomalyModel:
    """Holds the frozen backbone and the trainable store; ``forward`` is shared by
    training and inference."""

    def __init__(self, cfg: ModelConfig, backbone: FrozenBackbone, store: ParameterStore):
        self.cfg = cfg
        self.backbone = backbone
        self.store = store

    @classmethod
    def create(cls, cfg: ModelConfig, param_seed: int, backbone: FrozenBackbone | None = None,
               dtype=np.float32) -> "AnomalyModel":
        vit = cfg.vit
        bb = backbone if backbone is not None else bbmod.init_frozen_backbone(vit, dtype=dtype)
        cfg.sca.validate(vit.num_patches)
        rng = np.random.default_rng(param_seed)
        store = ParameterStore()
        bbmod.init_tokens(store, vit, rng, dtype=dtype)
        for layer in vit.tap_layers:
            if cfg.sca_enabled:
                scamod.init_sca_layer(store, layer, vit.num_patches, vit.dim, cfg.sca, rng, dtype=dtype)
            if cfg.saf_enabled:
                scoring.init_saf_layer(store, layer, vit.dim, rng, dtype=dtype)
        return cls(cfg, bb, store)

    def astype(self, dtype) -> "AnomalyModel":
        """Switch both frozen and trainable tensors to ``dtype`` in place."""
        self.backbone = self.backbone.astype(dtype)
        self.store.astype(dtype)
        return self

    def forward(self, images: np.ndarray) -> ModelOutput:
        return self.heads(self.encode(images))

    def encode(self, images: np.ndarray) -> bbmod.BackboneTap:
        return bbmod.encode(images, bbmod.tokens_from_store(self.store), self.backbone)

    def heads(self, taps: bbmod.BackboneTap) -> ModelOutput:
        """SCA, SAF, per-layer maps, fusion and the image score from encoder taps."""
        cfg = self.cfg
        vit = cfg.vit
        g = vit.grid
        layers = []
        for tap in taps:
            ta, tn, att = tap.t_a, tap.t_n, None
            if cfg.sca_enabled:
                layer = scamod.sca_layer_from_store(self.store, tap.layer, vit.num_patches, cfg.sca)
                out = scamod.apply(layer, tap.patches, tap.t_a, tap.t_n)
                ta, tn, att = out.t_a, out.t_n, out.attention
            patches = tap.patches
            if cfg.saf_enabled:
                patches = scoring.recalibrate(scoring.saf_layer_from_store(self.store, tap.layer), patches)
            s = scoring.patch_scores(patches, ta, tn)
            smap = nx.reshape(s, (s.shape[0], g, g))
            layers.append(LayerOutput(tap.layer, smap, ta, tn, tap.t_a, tap.t_n, att))
        fused = scoring.fuse([lo.score_map for lo in layers], (vit.image_size, vit.image_size))
        score, k = scoring.image_score(fused)
        return ModelOutput(layers, fused, score, k)

    def predict(self, images: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
        """Inference without a tape: returns (scores (B,), maps (B, H, W))."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        scores, maps = [], []
        with nx.no_grad():
            for start in range(0, len(images), batch_size):
                out = self.forward(images[start : start + batch_size])
                scores.append(out.score.data.copy())
                maps.append(out.fused.data.copy())
        return np.concatenate(scores), np.concatenate(maps)
