"""Run configuration: flat ``key = value`` text with dotted section prefixes.

Example::

    seed = 0
    backbone.depth = 8
    backbone.tap_layers = 2, 4, 6, 8
    sca.m = 4
    train.steps = 2000

Unknown keys are errors. ``seed`` is the single root of all randomness; the
backbone, parameter-init, data and batch-order streams are derived from it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .backbone import ViTConfig
from .errors import ConfigError
from .model import ModelConfig
from .objective import LossConfig, TrainConfig
from .sca import ScaConfig


@dataclass
class BackboneSection:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 8
    dim: int = 64
    heads: int = 4
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)
    weights: str = ""


@dataclass
class ScaSection:
    enabled: bool = True
    m: int = 4
    pos_mode: str = "learned_1d"
    value_uses_pos: bool = False
    alpha_init: float = 0.1


@dataclass
class SafSection:
    enabled: bool = True


@dataclass
class LossSection:
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    tau: float = 0.5
    w_cls: float = 1.0
    w_seg: float = 1.0
    w_ctr: float = 1.0
    ctr_raw_tokens: bool = False


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    log_every: int = 50


@dataclass
class DataSection:
    n_families: int = 4
    per_family: int = 128
    anomaly_ratio: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneSection = field(default_factory=BackboneSection)
    sca: ScaSection = field(default_factory=ScaSection)
    saf: SafSection = field(default_factory=SafSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    # -- derived seeds
    def derived_seed(self, stream: int) -> int:
        return int(np.random.SeedSequence([self.seed, stream]).generate_state(1, dtype=np.uint64)[0])

    @property
    def backbone_seed(self) -> int:
        return self.derived_seed(1)

    @property
    def param_seed(self) -> int:
        return self.derived_seed(2)

    @property
    def data_seed(self) -> int:
        return self.derived_seed(3) % (2**32)

    @property
    def batch_seed(self) -> int:
        return self.derived_seed(4)

    # -- typed views
    def vit(self) -> ViTConfig:
        b = self.backbone
        return ViTConfig(b.image_size, b.patch_size, b.depth, b.dim, b.heads, tuple(b.tap_layers), self.backbone_seed)

    def model(self) -> ModelConfig:
        s = self.sca
        return ModelConfig(self.vit(), ScaConfig(s.m, s.pos_mode, s.value_uses_pos, s.alpha_init),
                           sca_enabled=s.enabled, saf_enabled=self.saf.enabled)

    def loss_config(self) -> LossConfig:
        return LossConfig(**dataclasses.asdict(self.loss))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train))

    def validate(self) -> "RunConfig":
        self.model().sca.validate(self.vit().num_patches)
        self.loss_config()
        t = self.train
        if t.steps < 0 or t.batch_size < 1 or t.lr < 0 or t.log_every < 1:
            raise ConfigError("train.steps >= 0, train.batch_size >= 1, train.lr >= 0, train.log_every >= 1")
        d = self.data
        if d.n_families < 2 or d.per_family < 1 or not 0 <= d.anomaly_ratio <= 1:
            raise ConfigError("data.n_families >= 2, data.per_family >= 1, data.anomaly_ratio in [0, 1]")
        return self

    # -- text form
    def set(self, key: str, raw: str) -> None:
        section, _, name = key.rpartition(".")
        target = getattr(self, section, None) if section else self
        if target is None or not dataclasses.is_dataclass(target) or section not in ("",) + _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        hints = get_type_hints(type(target))
        if name not in hints or dataclasses.is_dataclass(hints[name]):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _parse_value(key, hints[name], raw))

    def items(self) -> list[tuple[str, object]]:
        out = [("seed", self.seed)]
        for sec in _SECTIONS:
            for f in fields(getattr(self, sec)):
                out.append((f"{sec}.{f.name}", getattr(getattr(self, sec), f.name)))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.items())


_SECTIONS = ("backbone", "sca", "saf", "loss", "train", "data")


def _parse_value(key: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    lines = list(text.splitlines()) + list(overrides or [])
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.validate()


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides)
