"""Finite-difference verification of the full training loss on a micro model.

Every trainable scalar is perturbed in turn, so the model is kept tiny:
16x16 images, 4x4 patches, two blocks of width 16, taps at both blocks and
two SCA anchors.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import ViTConfig
from .model import AnomalyModel, ModelConfig
from .objective import LossConfig, TrainBatch, token_cosine, total_loss
from .sca import ScaConfig

THRESHOLD = 1e-5
TOKEN_PREFIX = "token."


def micro_config(seed: int = 0) -> ModelConfig:
    vit = ViTConfig(image_size=16, patch_size=4, depth=2, dim=16, heads=2, tap_layers=(1, 2), seed=seed)
    return ModelConfig(vit, ScaConfig(m=2))


def micro_batch(seed: int = 0, size: int = 16) -> TrainBatch:
    """One clean and one defective image with a square mask."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    images = rng.uniform(0.2, 0.8, size=(2, 3, size, size))
    masks = np.zeros((2, size, size), dtype=np.uint8)
    masks[1, 5:9, 6:11] = 1
    images[1][:, masks[1] == 1] = rng.uniform(0.0, 1.0, size=(3, 1))
    return TrainBatch(images, np.array([0, 1]), masks)


@dataclass
class GradcheckResult:
    max_error: float
    worst_param: str
    worst_index: int
    num_scalars: int
    seconds: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_error < THRESHOLD


def _selection(out, cos: np.ndarray, tau: float) -> tuple:
    """Which pixels the top-k score picks and which hinge terms are active.

    The loss is smooth only while this signature is constant, so a stencil
    that changes it straddles a kink.
    """
    picks = nx.topk_indices(out.fused.data.reshape(out.fused.shape[0], -1), out.k)
    return tuple(np.sort(picks, axis=-1).reshape(-1)), tuple(cos + tau > 0)


def ridders(central, h: float, min_h: float = 1e-8, shrink: float = 1.4, levels: int = 10,
            safe: float = 2.0) -> tuple[float, float]:
    """Derivative by Ridders' polynomial extrapolation of central differences.

    ``central(step)`` returns ``(estimate, smooth)``. A non-smooth stencil
    means the wider ones may straddle the same switch too, so the tableau
    restarts from a quarter of that step. Returns the entry with the smallest
    internal error estimate, and that estimate.
    """
    prev: list[float] | None = None
    best, best_err = math.nan, math.inf
    fac2 = shrink * shrink
    used = 0
    while used < levels and h >= min_h:
        est, smooth = central(h)
        if not smooth:
            prev, best, best_err, used = None, math.nan, math.inf, 0
            h /= 4
            continue
        used += 1
        h /= shrink
        if prev is None:
            prev, best = [est], est
            continue
        row = [est]
        fac = fac2
        for j in range(1, len(prev) + 1):
            row.append((row[j - 1] * fac - prev[j - 1]) / (fac - 1.0))
            fac *= fac2
            err = max(abs(row[j] - row[j - 1]), abs(row[j] - prev[j - 1]))
            if err <= best_err:
                best, best_err = row[j], err
        if abs(row[-1] - prev[-1]) >= safe * best_err:
            break
        prev = row
    return best, best_err


def derivative(central, starts: tuple[float, ...], confident: float = 1e-7) -> float:
    """Ridders from each starting step in turn until one reports a relative
    error estimate below ``confident``; otherwise the most confident result."""
    best, best_err = math.nan, math.inf
    for h in starts:
        value, err = ridders(central, h)
        if err < best_err:
            best, best_err = value, err
        if best_err <= confident * abs(best):
            break
    return best


def check_model(model: AnomalyModel, batch: TrainBatch, loss_cfg: LossConfig | None = None,
                starts: tuple[float, ...] = (0.02, 0.004)) -> GradcheckResult:
    """Compare tape gradients of the total loss against Ridders-extrapolated
    central differences, one scalar at a time, across the whole parameter store.

    Gradients here span many orders of magnitude, so no single fixed step is
    accurate for all of them; extrapolation adapts per scalar, and a second,
    smaller starting step covers sharply curved directions. Stencils that
    cross a top-k or hinge switch are shrunk until they no longer do. The
    frozen encoder only depends on the token parameters, so its taps are
    computed once and reused for every other parameter.
    """
    loss_cfg = loss_cfg or LossConfig()
    start = time.perf_counter()
    nx.reset_tape()
    loss = total_loss(model.forward(batch.images), batch, loss_cfg)["loss"]
    nx.backward(loss, model.store)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in model.store.items()}
    model.store.zero_grad()
    with nx.no_grad():
        cached_taps = model.encode(batch.images)

    def evaluate(reuse_taps: bool):
        with nx.no_grad():
            out = model.heads(cached_taps if reuse_taps else model.encode(batch.images))
            parts = total_loss(out, batch, loss_cfg)
            deep = out.deepest
            ta, tn = (deep.raw_t_a, deep.raw_t_n) if loss_cfg.ctr_raw_tokens else (deep.t_a, deep.t_n)
            cos = token_cosine(ta, tn).data
        return float(parts["loss"].data), _selection(out, cos, loss_cfg.tau)

    _, base_sig = evaluate(True)
    worst = (0.0, "", -1)
    per_param = {}
    count = 0
    for name, t in model.store.items():
        reuse = not name.startswith(TOKEN_PREFIX)
        flat = t.data.reshape(-1)

        def central(step, i):
            orig = flat[i]
            flat[i] = orig + step
            fp, sp = evaluate(reuse)
            flat[i] = orig - step
            fm, sm = evaluate(reuse)
            flat[i] = orig
            return (fp - fm) / (2.0 * step), sp == base_sig and sm == base_sig

        numeric = np.array([derivative(lambda step: central(step, i), starts) for i in range(flat.size)])
        count += flat.size
        if not np.all(np.isfinite(numeric)):
            err = np.full(flat.size, np.inf)
        else:
            err = nx.relative_error(analytic[name].reshape(-1), numeric)
        j = int(np.argmax(err))
        per_param[name] = float(err[j])
        if err[j] > worst[0] or not worst[1]:
            worst = (float(err[j]), name, j)
    return GradcheckResult(worst[0], worst[1], worst[2], count, time.perf_counter() - start, per_param)


def run(seed: int = 0) -> GradcheckResult:
    model = AnomalyModel.create(micro_config(seed), param_seed=seed + 1, dtype=np.float64)
    with nx.precision(np.float64):
        return check_model(model, micro_batch(seed))
