"""Procedural grayscale textures with chromatic synthetic defects.

Families are the stand-in for object categories: each family fixes a texture
generator and its parameter ranges, and train/test splits never share a
family. Every sample draws its own RNG stream from (seed, family_id, index),
so generation order does not matter.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, GenerationError

TEXTURE_KINDS = ("stripes", "checker", "value_noise", "blobs")
DEFECT_KINDS = ("blob", "scratch", "cutpaste")
MIN_AREA = 0.005
MAX_AREA = 0.10
MAX_ATTEMPTS = 100
MIN_VISIBILITY = 0.08
PIXEL_NOISE = 0.015


@dataclass(frozen=True)
class SynthFamily:
    family_id: int
    kind: str
    seed: int
    params: dict = field(default_factory=dict, compare=False)


@dataclass
class SynthSample:
    image: np.ndarray  # (3, S, S) float32 in [0, 1], multiples of 1/255
    label: int
    mask: np.ndarray  # (S, S) uint8 in {0, 1}
    family_id: int
    index: int = 0
    defect: str | None = None


def quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def make_family(family_id: int, seed: int = 0) -> SynthFamily:
    """Family parameter ranges are drawn once from (seed, family_id)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, family_id, 0xFA]))
    kind = TEXTURE_KINDS[family_id % len(TEXTURE_KINDS)]
    lo_c = rng.uniform(0.25, 0.4)
    params = {"contrast": (lo_c, lo_c + rng.uniform(0.1, 0.25)), "base": rng.uniform(0.4, 0.6)}
    if kind == "stripes":
        f0 = rng.uniform(3.0, 6.0)
        params.update(freq=(f0, f0 + rng.uniform(1.0, 3.0)), theta=rng.uniform(0, np.pi), spread=rng.uniform(0.1, 0.4))
    elif kind == "checker":
        c0 = rng.uniform(5.0, 9.0)
        params.update(cell=(c0, c0 + rng.uniform(1.0, 5.0)), theta=rng.uniform(0, np.pi / 2), spread=rng.uniform(0.0, 0.3))
    elif kind == "value_noise":
        g0 = int(rng.integers(4, 7))
        params.update(cells=(g0, g0 + int(rng.integers(1, 4))))
    else:
        n0 = int(rng.integers(4, 8))
        params.update(count=(n0, n0 + int(rng.integers(2, 6))), sigma=(rng.uniform(2.5, 4.0), rng.uniform(4.5, 8.0)))
    return SynthFamily(family_id, kind, seed, params)


def _sample_rng(family: SynthFamily, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([family.seed, family.family_id, index, stream]))


def _texture(family: SynthFamily, size: int, rng: np.random.Generator) -> np.ndarray:
    p = family.params
    contrast = rng.uniform(*p["contrast"])
    base = p["base"]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) * (64.0 / size)
    if family.kind == "stripes":
        freq = rng.uniform(*p["freq"])
        theta = p["theta"] + rng.uniform(-p["spread"], p["spread"])
        phase = rng.uniform(0, 2 * np.pi)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        v = np.sin(2 * np.pi * freq * u / 64.0 + phase)
    elif family.kind == "checker":
        cell = rng.uniform(*p["cell"])
        theta = p["theta"] + rng.uniform(-p["spread"], p["spread"])
        off = rng.uniform(0, cell, size=2)
        u = xx * np.cos(theta) + yy * np.sin(theta) + off[0]
        w = -xx * np.sin(theta) + yy * np.cos(theta) + off[1]
        v = np.where((np.floor(u / cell) + np.floor(w / cell)) % 2 == 0, 1.0, -1.0)
    elif family.kind == "value_noise":
        cells = int(rng.integers(p["cells"][0], p["cells"][1] + 1))
        grid = rng.uniform(-1, 1, size=(cells + 2, cells + 2))
        gy = yy / 64.0 * cells
        gx = xx / 64.0 * cells
        iy, ix = np.floor(gy).astype(int), np.floor(gx).astype(int)
        fy, fx = gy - iy, gx - ix
        sy, sx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        top = grid[iy, ix] * (1 - sx) + grid[iy, ix + 1] * sx
        bot = grid[iy + 1, ix] * (1 - sx) + grid[iy + 1, ix + 1] * sx
        v = top * (1 - sy) + bot * sy
        v = v / max(1e-6, np.abs(v).max())
    else:
        count = int(rng.integers(p["count"][0], p["count"][1] + 1))
        v = np.zeros_like(xx)
        for _ in range(count):
            cy, cx = rng.uniform(0, 64, size=2)
            sigma = rng.uniform(*p["sigma"])
            v += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        v = v / max(1e-6, np.abs(v).max())
    gray = base + 0.5 * contrast * v + rng.normal(0, PIXEL_NOISE, size=v.shape)
    return np.clip(gray, 0.0, 1.0)


def gen_normal(family: SynthFamily, index: int, image_size: int = 64) -> SynthSample:
    rng = _sample_rng(family, index)
    gray = _texture(family, image_size, rng)
    image = quantize(np.repeat(gray[None], 3, axis=0))
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    return SynthSample(image, 0, mask, family.family_id, index)


def _vivid_color(rng: np.random.Generator) -> np.ndarray:
    levels = np.array([rng.uniform(0.75, 1.0), rng.uniform(0.0, 0.45), rng.uniform(0.0, 0.2)])
    return rng.permutation(levels)


def _region(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "blob":
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        ry, rx = rng.uniform(2.5, 10.0, size=2) * s
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        w = -dx * np.sin(th) + dy * np.cos(th)
        wobble = 1.0 + 0.15 * np.sin(3 * np.arctan2(w, u) + rng.uniform(0, 2 * np.pi))
        return (u / rx) ** 2 + (w / ry) ** 2 <= wobble**2
    if kind == "scratch":
        length = rng.uniform(18.0, 44.0) * s
        th = rng.uniform(0, np.pi)
        width = rng.uniform(1.2, 2.6) * max(s, 0.5)
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        ay, ax = cy - 0.5 * length * np.sin(th), cx - 0.5 * length * np.cos(th)
        by, bx = cy + 0.5 * length * np.sin(th), cx + 0.5 * length * np.cos(th)
        py, px = yy - ay, xx - ax
        vy, vx = by - ay, bx - ax
        t = np.clip((py * vy + px * vx) / (vy * vy + vx * vx), 0.0, 1.0)
        dist = np.hypot(py - t * vy, px - t * vx)
        return dist <= width / 2.0
    raise ValueError(kind)


def inject_defect(sample: SynthSample, kind: str, rng: np.random.Generator) -> SynthSample:
    """Alter ``sample`` only inside a freshly drawn region; returns a new sample."""
    if sample.label != 0:
        raise ValueError("inject_defect expects a defect-free sample")
    if kind not in DEFECT_KINDS:
        raise ValueError(f"unknown defect kind {kind!r}")
    orig = sample.image
    size = orig.shape[-1]
    npx = size * size
    for _ in range(MAX_ATTEMPTS):
        new = orig.astype(np.float64).copy()
        if kind == "cutpaste":
            s = size / 64.0
            h = max(1, int(round(rng.uniform(5.0, 16.0) * s)))
            w = max(1, int(round(rng.uniform(5.0, 16.0) * s)))
            if h >= size or w >= size:
                continue
            sy, sx = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            ty, tx = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            patch = orig[:, sy : sy + h, sx : sx + w].astype(np.float64)
            gains = rng.permutation([rng.uniform(1.3, 1.8), rng.uniform(0.3, 0.7), rng.uniform(0.6, 1.0)])
            patch = np.clip(patch * gains[:, None, None] + rng.uniform(-0.1, 0.1), 0, 1)
            region = np.zeros((size, size), dtype=bool)
            region[ty : ty + h, tx : tx + w] = True
            new[:, ty : ty + h, tx : tx + w] = patch
        else:
            region = _region(kind, size, rng)
            color = _vivid_color(rng)
            if kind == "scratch":
                alpha = rng.uniform(0.75, 0.95)
            else:
                alpha = rng.uniform(0.6, 0.9)
            blended = (1 - alpha) * new + alpha * color[:, None, None]
            new = np.where(region[None], blended, new)
        new = quantize(new)
        new = np.where(region[None], new, orig)
        changed = np.any(new != orig, axis=0)
        area = changed.sum() / npx
        if not MIN_AREA <= area <= MAX_AREA:
            continue
        if np.abs(new - orig)[:, changed].mean() < MIN_VISIBILITY:
            continue
        return replace(sample, image=new.astype(np.float32), label=1, mask=changed.astype(np.uint8), defect=kind)
    raise GenerationError(f"could not place a valid {kind} defect after {MAX_ATTEMPTS} attempts")


def gen_sample(family: SynthFamily, index: int, anomalous: bool, image_size: int = 64) -> SynthSample:
    s = gen_normal(family, index, image_size)
    if not anomalous:
        return s
    kind = DEFECT_KINDS[index % len(DEFECT_KINDS)]
    return inject_defect(s, kind, _sample_rng(family, index, stream=1))


def gen_family_set(family: SynthFamily, count: int, anomaly_ratio: float, image_size: int = 64) -> list[SynthSample]:
    n_anom = int(round(anomaly_ratio * count))
    return [gen_sample(family, i, i < n_anom, image_size) for i in range(count)]


def make_split(n_families: int, per_family: int, anomaly_ratio: float = 0.5, seed: int = 0,
               image_size: int = 64) -> tuple[list[SynthSample], list[SynthSample]]:
    """First half of the families train, the rest test; no family appears in both."""
    if n_families < 2:
        raise ConfigError(f"need at least 2 families for a zero-shot split, got {n_families}")
    if not 0.0 <= anomaly_ratio <= 1.0:
        raise ConfigError(f"anomaly_ratio {anomaly_ratio} outside [0, 1]")
    n_train = n_families // 2
    families = [make_family(f, seed) for f in range(n_families)]
    train = [s for fam in families[:n_train] for s in gen_family_set(fam, per_family, anomaly_ratio, image_size)]
    test = [s for fam in families[n_train:] for s in gen_family_set(fam, per_family, anomaly_ratio, image_size)]
    assert_disjoint(train, test)
    return train, test


def assert_disjoint(train: list[SynthSample], test: list[SynthSample]) -> None:
    shared = {s.family_id for s in train} & {s.family_id for s in test}
    if shared:
        raise ConfigError(f"train and test share families {sorted(shared)}")


def stack(samples: list[SynthSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    return images, labels, masks
