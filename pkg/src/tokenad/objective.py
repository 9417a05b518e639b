"""Training objective (classification + segmentation + token margin) and loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, NonFiniteLossError
from .model import AnomalyModel, ModelOutput
from .numerics import Tensor
from .scoring import upsample_bilinear

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    tau: float = 0.5
    w_cls: float = 1.0
    w_seg: float = 1.0
    w_ctr: float = 1.0
    ctr_raw_tokens: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"loss.tau={self.tau} must lie in [0, 1)")
        if self.focal_gamma < 0:
            raise ConfigError(f"loss.focal_gamma={self.focal_gamma} must be >= 0")
        if self.dice_smooth < 0:
            raise ConfigError("loss.dice_smooth must be >= 0")


@dataclass
class TrainBatch:
    images: np.ndarray  # (B, 3, H, W)
    labels: np.ndarray  # (B,)
    masks: np.ndarray  # (B, H, W) in {0, 1}

    def __post_init__(self):
        has_defect = self.masks.reshape(len(self.masks), -1).any(axis=1)
        if not np.array_equal(has_defect, self.labels.astype(bool)):
            raise ValueError("labels must be 1 exactly for images with a non-empty mask")


def loss_cls(score: Tensor, y) -> Tensor:
    """Mean binary cross-entropy on sigmoid(score), as y*softplus(-S) + (1-y)*softplus(S)."""
    y = np.asarray(y, dtype=score.dtype).reshape(score.shape)
    pos = nx.mul(Tensor(y), nx.softplus(nx.scale(score, -1.0)))
    neg = nx.mul(Tensor(1.0 - y), nx.softplus(score))
    return nx.mean(nx.add(pos, neg))


def _check_same(pred: Tensor, mask: np.ndarray, what: str) -> None:
    if pred.shape != mask.shape:
        raise DimensionError(f"{what}: prediction {pred.shape} vs mask {mask.shape}")


def loss_focal(pred: Tensor, mask, gamma: float = 2.0) -> Tensor:
    """Pixel-mean of -(1 - p_t)^gamma log p_t for probabilities ``pred``."""
    mask = np.asarray(mask, dtype=pred.dtype)
    _check_same(pred, mask, "focal")
    pt = nx.add(nx.mul(pred, Tensor(2.0 * mask - 1.0)), Tensor(1.0 - mask))
    nll = nx.scale(nx.log(pt), -1.0)
    if gamma != 0.0:
        nll = nx.mul(nx.pow(nx.sub(1.0, pt), gamma), nll)
    return nx.mean(nll)


def loss_dice(pred: Tensor, mask, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(pM) + s) / (sum p + sum M + s), per image then averaged."""
    mask = np.asarray(mask, dtype=pred.dtype)
    _check_same(pred, mask, "dice")
    if pred.ndim == 2:
        pred = nx.reshape(pred, (1,) + pred.shape)
        mask = mask[None]
    b = pred.shape[0]
    flat = nx.reshape(pred, (b, -1))
    m = mask.reshape(b, -1)
    inter = nx.sum(nx.mul(flat, Tensor(m)), axis=1)
    num = nx.add(nx.scale(inter, 2.0), smooth)
    den = nx.add(nx.add(nx.sum(flat, axis=1), Tensor(m.sum(axis=1))), smooth)
    return nx.mean(nx.sub(1.0, nx.div(num, den)))


def token_cosine(t_a: Tensor, t_n: Tensor) -> Tensor:
    a = nx.l2_normalize(t_a, name="anomaly token")
    n = nx.l2_normalize(t_n, name="normal token")
    return nx.sum(nx.mul(a, n), axis=-1)


def loss_ctr(t_a: Tensor, t_n: Tensor, tau: float = 0.5) -> Tensor:
    """Hinge max(0, cos + tau), averaged over the batch."""
    return nx.mean(nx.relu(nx.add(token_cosine(t_a, t_n), tau)))


def ctr_from_cosine(cos: float, tau: float = 0.5) -> float:
    return max(0.0, cos + tau)


def seg_terms(out: ModelOutput, masks: np.ndarray, cfg: LossConfig) -> list[tuple[Tensor, Tensor]]:
    """(focal, dice) per tap layer on sigmoid maps upsampled to mask resolution."""
    target = masks.shape[-2:]
    terms = []
    for lo in out.layers:
        prob = upsample_bilinear(nx.sigmoid(lo.score_map), target)
        terms.append((loss_focal(prob, masks, cfg.focal_gamma), loss_dice(prob, masks, cfg.dice_smooth)))
    return terms


def total_loss(out: ModelOutput, batch: TrainBatch, cfg: LossConfig) -> dict[str, Tensor]:
    cls = loss_cls(out.score, batch.labels)
    terms = seg_terms(out, batch.masks, cfg)
    seg = None
    for f, d in terms:
        term = nx.add(f, d)
        seg = term if seg is None else nx.add(seg, term)
    deep = out.deepest
    ta, tn = (deep.raw_t_a, deep.raw_t_n) if cfg.ctr_raw_tokens else (deep.t_a, deep.t_n)
    cos = token_cosine(ta, tn)
    ctr = nx.mean(nx.relu(nx.add(cos, cfg.tau)))
    total = nx.add(nx.add(nx.scale(cls, cfg.w_cls), nx.scale(seg, cfg.w_seg)), nx.scale(ctr, cfg.w_ctr))
    return {"loss": total, "cls": cls, "seg": seg, "ctr": ctr, "cos_an": nx.mean(cos)}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    log_every: int = 50


def format_record(step: int, values: dict[str, float]) -> str:
    return (f"step={step} loss={values['loss']:.6f} cls={values['cls']:.6f} seg={values['seg']:.6f} "
            f"ctr={values['ctr']:.6f} cos_an={values['cos_an']:.6f}")


def train_step(model: AnomalyModel, batch: TrainBatch, loss_cfg: LossConfig, lr: float,
               step: int | None = None) -> dict[str, float]:
    """Forward, loss, backward and one Adam update. Returns component values."""
    nx.reset_tape()
    out = model.forward(batch.images)
    parts = total_loss(out, batch, loss_cfg)
    values = {k: float(v.data) for k, v in parts.items()}
    for name in ("cls", "seg", "ctr", "loss"):
        if not math.isfinite(values[name]):
            nx.reset_tape()
            raise NonFiniteLossError(name, values[name], step)
    nx.backward(parts["loss"], model.store)
    nx.adam_step(model.store, lr)
    return values


def batch_stream(images: np.ndarray, labels: np.ndarray, masks: np.ndarray, batch_size: int,
                 rng: np.random.Generator) -> Iterator[TrainBatch]:
    """Endless shuffled epochs; the last partial batch of an epoch wraps into the next."""
    n = len(images)
    order = np.empty(0, dtype=int)
    while True:
        while len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:batch_size], order[batch_size:]
        yield TrainBatch(images[idx], labels[idx], masks[idx])


def train(model: AnomalyModel, batches: Iterator[TrainBatch], loss_cfg: LossConfig, train_cfg: TrainConfig,
          emit: Callable[[str], None] | None = None) -> list[dict[str, float]]:
    history = []
    for step in range(1, train_cfg.steps + 1):
        values = train_step(model, next(batches), loss_cfg, train_cfg.lr, step)
        history.append(values)
        if emit is not None and (step == 1 or step % train_cfg.log_every == 0 or step == train_cfg.steps):
            emit(format_record(step, values))
    return history
