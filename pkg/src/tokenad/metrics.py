"""Image- and pixel-level detection metrics, plus a small PCA for feature plots.

AUROC, F1-max, AP and PRO all sweep exact thresholds at every distinct
observed score. Undefined metrics raise ``UndefinedMetricError``; reports
turn those into JSON nulls.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DegenerateSpectrumError, DimensionError, UndefinedMetricError

log = logging.getLogger(__name__)

PRO_FPR_LIMIT = 0.3
_EIGHT = np.ones((3, 3), dtype=int)


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores vs {y.size} labels")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) for 'score >= t' at every distinct t, highest first."""
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    tp = np.cumsum(yy)
    fp = np.cumsum(~yy)
    last = np.r_[np.nonzero(ss[1:] != ss[:-1])[0], ss.size - 1]
    return tp[last], fp[last]


def f1_max(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1-max needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    # all-positive threshold is the last distinct value, already included
    return float(f1.max())


def average_precision(scores, labels) -> float:
    """Step-interpolated AP over the list ranked by (score desc, index asc)."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    yy = y[order]
    tp = np.cumsum(yy)
    precision = tp / np.arange(1, yy.size + 1)
    return float(precision[yy].sum() / n_pos)


def connected_components(mask) -> list[np.ndarray]:
    """8-connected foreground components, each as an (n, 2) array of (row, col)."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got {m.shape}")
    labels, count = ndimage.label(m, structure=_EIGHT)
    if count == 0:
        return []
    flat = labels.reshape(-1)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, count + 2))
    w = m.shape[1]
    comps = []
    for c in range(count):
        idx = order[bounds[c] : bounds[c + 1]]
        comps.append(np.stack([idx // w, idx % w], axis=1))
    return comps


def integrate_limited(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoid area under (x, y) for x in [0, limit], linearly interpolated at the limit."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = x <= limit
    xs, ys = x[inside], y[inside]
    if not inside.all():
        j = int(np.argmax(~inside))
        x0, y0, x1, y1 = x[j - 1], y[j - 1], x[j], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs = np.r_[xs, limit]
        ys = np.r_[ys, y_lim]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def pro_curve(maps, masks) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, PRO) at every distinct score, starting from the empty prediction (0, 0)."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    if maps.shape != masks.shape:
        raise DimensionError(f"score maps {maps.shape} vs masks {masks.shape}")
    weight = np.zeros(maps.shape, dtype=np.float64)
    n_regions = 0
    comps_per_image = []
    for i in range(len(masks)):
        comps = connected_components(masks[i])
        comps_per_image.append(comps)
        n_regions += len(comps)
    if n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one ground-truth region")
    for i, comps in enumerate(comps_per_image):
        for comp in comps:
            weight[i, comp[:, 0], comp[:, 1]] = 1.0 / (n_regions * len(comp))
    negatives = ~masks
    n_neg = int(negatives.sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs normal pixels to define a false-positive rate")
    s = maps.reshape(-1)
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    pro_cum = np.cumsum(weight.reshape(-1)[order])
    fp_cum = np.cumsum(negatives.reshape(-1)[order])
    last = np.r_[np.nonzero(ss[1:] != ss[:-1])[0], ss.size - 1]
    fpr = np.r_[0.0, fp_cum[last] / n_neg]
    pro_vals = np.r_[0.0, pro_cum[last]]
    return fpr, pro_vals


def pro(maps, masks, fpr_limit: float = PRO_FPR_LIMIT) -> float:
    fpr, pro_vals = pro_curve(maps, masks)
    return float(np.clip(integrate_limited(fpr, pro_vals, fpr_limit) / fpr_limit, 0.0, 1.0))


def pca_project(features, k: int = 2, tol: float = 1e-9, max_iter: int = 10000):
    """Top-k principal directions by power iteration with deflation.

    Returns (projected (n, k), explained variance ratios (k,), components (k, d)).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"pca_project needs >= 2 samples of shape (n, d), got {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    total = float(np.trace(cov))
    if not total > 0:
        raise DegenerateSpectrumError("features have zero variance")
    d = cov.shape[0]
    k = min(k, d)
    rng = np.random.default_rng(0)
    work = cov.copy()
    comps, values = [], []
    for _ in range(k):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            nrm = np.linalg.norm(w)
            if nrm <= 1e-300:
                lam = 0.0
                break
            w /= nrm
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            lam = float(v @ work @ v)
            if done:
                break
        comps.append(v)
        values.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    comps = np.array(comps)
    return xc @ comps.T, np.array(values) / total, comps


# ---------------------------------------------------------------- reports

IMAGE_KEYS = ("auroc", "f1max", "ap")
PIXEL_KEYS = ("auroc", "f1max", "ap", "pro")


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError as exc:
        log.warning("metric undefined: %s", exc)
        return None


@dataclass
class MetricsReport:
    image: dict[str, float | None] = field(default_factory=dict)
    pixel: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "image": {k: self.image.get(k) for k in IMAGE_KEYS},
            "pixel": {k: self.pixel.get(k) for k in PIXEL_KEYS},
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["image"], d["pixel"], d.get("counts", {}))


def evaluate(image_scores, labels, maps, masks, fpr_limit: float = PRO_FPR_LIMIT) -> MetricsReport:
    s = np.asarray(image_scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    image = {
        "auroc": _maybe(auroc, s, y),
        "f1max": _maybe(f1_max, s, y),
        "ap": _maybe(average_precision, s, y),
    }
    counts = {"images": int(y.size), "anomalous": int(y.sum()), "pixels": int(masks.size),
              "anomalous_pixels": int(masks.sum())}
    if masks.any():
        pixel = {
            "auroc": _maybe(auroc, maps, masks),
            "f1max": _maybe(f1_max, maps, masks),
            "ap": _maybe(average_precision, maps, masks),
            "pro": _maybe(pro, maps, masks, fpr_limit),
        }
    else:
        log.warning("no anomalous pixels in the evaluation set; pixel metrics are null")
        pixel = {k: None for k in PIXEL_KEYS}
    return MetricsReport(image, pixel, counts)
