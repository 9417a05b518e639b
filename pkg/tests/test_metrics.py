from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokenad import metrics as mt
from tokenad.errors import DegenerateSpectrumError, UndefinedMetricError


# ---------------------------------------------------------------- brute-force oracles

def auroc_pairs(s, y):
    pos, neg = s[y == 1], s[y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def f1_exhaustive(s, y):
    best = 0.0
    for t in list(np.unique(s)) + [-np.inf]:
        pred = s >= t
        tp = np.sum(pred & (y == 1))
        fp = np.sum(pred & (y == 0))
        fn = np.sum(~pred & (y == 1))
        if tp:
            best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


def ap_rank_walk(s, y):
    ranked = sorted(range(len(s)), key=lambda i: (-s[i], i))
    n_pos = int(y.sum())
    ap, prev_recall = 0.0, 0.0
    for k in range(1, len(s) + 1):
        top = ranked[:k]
        tp = sum(y[i] for i in top)
        precision, recall = tp / k, tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def components_bfs(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                comp, queue = [], deque([(r, c)])
                seen[r, c] = True
                while queue:
                    y, x = queue.popleft()
                    comp.append((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx_ = y + dy, x + dx
                            if 0 <= ny < h and 0 <= nx_ < w and mask[ny, nx_] and not seen[ny, nx_]:
                                seen[ny, nx_] = True
                                queue.append((ny, nx_))
                comps.append(comp)
    return comps


def pro_dense_sweep(maps, masks, limit=0.3):
    regions = [(i, comp) for i in range(len(masks)) for comp in components_bfs(masks[i])]
    neg = ~masks
    points = [(0.0, 0.0)]
    for t in sorted(np.unique(maps), reverse=True):
        pred = maps >= t
        fpr = np.sum(pred & neg) / np.sum(neg)
        overlap = np.mean([np.mean([pred[i, y, x] for y, x in comp]) for i, comp in regions])
        points.append((fpr, overlap))
    area, (x0, y0) = 0.0, points[0]
    for x1, y1 in points[1:]:
        if x1 > limit:
            y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            area += (limit - x0) * (y0 + y_lim) / 2
            break
        area += (x1 - x0) * (y0 + y1) / 2
        x0, y0 = x1, y1
    return area / limit


def random_instance(rng, n_max=50):
    n = int(rng.integers(2, n_max + 1))
    y = rng.integers(0, 2, size=n)
    y[rng.integers(n)] = 1
    y[(rng.integers(n - 1) + 1 + np.flatnonzero(y)[0]) % n] = 0  # ensure both classes
    if rng.uniform() < 0.5:
        s = rng.integers(0, 6, size=n).astype(float)  # heavy ties
    else:
        s = rng.normal(size=n)
    return s, y


@pytest.mark.parametrize("metric,oracle", [(mt.auroc, auroc_pairs), (mt.f1_max, f1_exhaustive),
                                           (mt.average_precision, ap_rank_walk)])
def test_metrics_match_oracles_on_250_random_instances(metric, oracle):
    rng = np.random.default_rng(123)
    for _ in range(250):
        s, y = random_instance(rng)
        assert abs(metric(s, y) - oracle(s, y)) < 1e-9


def test_pro_matches_dense_sweep_on_8x8_maps():
    rng = np.random.default_rng(7)
    for trial in range(60):
        n_img = int(rng.integers(1, 4))
        masks = np.zeros((n_img, 8, 8), dtype=bool)
        for i in range(n_img):
            for _ in range(int(rng.integers(0, 3))):
                r, c = rng.integers(0, 7, size=2)
                masks[i, r : r + rng.integers(1, 3), c : c + rng.integers(1, 4)] = True
        if not masks.any():
            masks[0, 2:4, 2:4] = True
        maps = rng.normal(size=masks.shape) + 1.5 * masks
        if trial % 2:
            maps = np.round(maps, 1)  # ties across pixels
        assert abs(mt.pro(maps, masks) - pro_dense_sweep(maps, masks)) < 1e-6


def test_pro_two_region_case():
    mask = np.zeros((8, 8), dtype=bool)
    mask[1:3, 1:3] = True
    mask[5:8, 4:7] = True
    maps = np.random.default_rng(0).uniform(size=(8, 8))
    maps[1:3, 1:3] += 0.6
    assert abs(mt.pro(maps, mask) - pro_dense_sweep(maps[None], mask[None])) < 1e-6


# ---------------------------------------------------------------- examples

def test_auroc_examples():
    assert mt.auroc([0.9, 0.1], [1, 0]) == 1.0
    assert mt.auroc([0.1, 0.9], [1, 0]) == 0.0
    assert mt.auroc([0.5] * 4, [1, 0, 1, 0]) == 0.5


def test_f1_examples():
    assert mt.f1_max([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(0.8)
    assert mt.f1_max([0.9, 0.7, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert mt.f1_max([0.9, 0.2, 0.1], [1, 0, 0]) == 1.0


def test_ap_examples():
    assert mt.average_precision([0.9, 0.1], [1, 0]) == 1.0
    assert mt.average_precision([0.9, 0.1], [0, 1]) == 0.5


def test_pro_perfect_and_disjoint():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 2:5] = True
    assert mt.pro(mask.astype(float), mask) == pytest.approx(1.0)
    # every ground-truth pixel ranks below every background pixel
    disjoint = np.random.default_rng(0).uniform(1.0, 2.0, size=(8, 8))
    disjoint[mask] = 0.0
    assert mt.pro(disjoint, mask) == 0.0


def test_pro_ties_between_regions_and_background_interpolate():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 2:5] = True
    binary = np.zeros((8, 8))
    binary[6:, 6:] = 1.0
    # the last threshold admits all GT and the remaining background together,
    # so the curve rises linearly from (4/55, 0) to (1, 1); area up to 0.3, normalised
    x0 = 4 / 55
    y_lim = (0.3 - x0) / (1 - x0)
    assert mt.pro(binary, mask) == pytest.approx((0.3 - x0) * y_lim / 2 / 0.3, abs=1e-12)


@pytest.mark.parametrize("fn", [mt.auroc, mt.f1_max, mt.average_precision])
def test_undefined_metrics_raise(fn):
    with pytest.raises(UndefinedMetricError):
        fn([0.1, 0.2], [0, 0])


def test_auroc_needs_negatives_and_pro_needs_regions():
    with pytest.raises(UndefinedMetricError):
        mt.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        mt.pro(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))


@given(st.integers(0, 2**32 - 1))
def test_rank_invariance_and_auroc_complement(seed):
    rng = np.random.default_rng(seed)
    s, y = random_instance(rng, 30)
    s = s + rng.normal(size=s.size) * 1e-3  # tie-free
    warped = np.exp(3 * s) + 2
    for fn in (mt.auroc, mt.f1_max, mt.average_precision):
        assert fn(warped, y) == pytest.approx(fn(s, y), abs=1e-12)
    assert mt.auroc(s, y) + mt.auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_metrics_in_unit_interval(seed):
    s, y = random_instance(np.random.default_rng(seed))
    for fn in (mt.auroc, mt.f1_max, mt.average_precision):
        assert 0.0 <= fn(s, y) <= 1.0


# ---------------------------------------------------------------- components

def test_components_examples():
    assert len(mt.connected_components(np.array([[1, 0], [0, 1]]))) == 1
    assert mt.connected_components(np.zeros((3, 3))) == []
    full = mt.connected_components(np.ones((4, 5)))
    assert len(full) == 1 and len(full[0]) == 20


@given(st.integers(0, 2**32 - 1))
def test_components_match_bfs(seed):
    mask = np.random.default_rng(seed).uniform(size=(7, 9)) < 0.35
    ours = sorted(sorted(map(tuple, c.tolist())) for c in mt.connected_components(mask))
    ref = sorted(sorted(c) for c in components_bfs(mask))
    assert ours == ref


# ---------------------------------------------------------------- PCA

def test_pca_collinear_points():
    x = np.outer(np.linspace(-1, 2, 10), [1.0, 2.0, -1.0])
    _, ratios, _ = mt.pca_project(x)
    assert ratios[0] == pytest.approx(1.0, abs=1e-6)


def test_pca_isotropic_gaussian():
    x = np.random.default_rng(0).normal(size=(2000, 2))
    _, ratios, _ = mt.pca_project(x)
    assert np.all(np.abs(ratios - 0.5) < 0.1) and ratios.sum() <= 1 + 1e-12


@pytest.mark.parametrize("d", [2, 5, 8])
def test_pca_matches_full_eigendecomposition(d):
    rng = np.random.default_rng(d)
    x = rng.normal(size=(60, d)) @ np.diag(np.linspace(3, 0.5, d)) @ np.linalg.qr(rng.normal(size=(d, d)))[0]
    proj, ratios, comps = mt.pca_project(x, k=2)
    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(np.cov(xc.T))
    top = vecs[:, ::-1][:, :2]
    assert np.allclose(ratios, vals[::-1][:2] / vals.sum(), atol=1e-6)
    # same subspace, and projections reproduce the pairwise dot products in it
    assert np.allclose(np.abs(comps @ top), np.eye(2), atol=1e-5)
    ref = xc @ top
    assert np.allclose(proj @ proj.T, ref @ ref.T, atol=1e-6)


def test_pca_zero_variance():
    with pytest.raises(DegenerateSpectrumError):
        mt.pca_project(np.ones((5, 3)))


# ---------------------------------------------------------------- reports

def test_report_keys_and_nulls_for_single_class_pixels():
    maps = np.random.default_rng(0).normal(size=(4, 8, 8))
    report = mt.evaluate([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1], maps, np.zeros((4, 8, 8)))
    d = report.to_dict()
    assert list(d["image"]) == ["auroc", "f1max", "ap"]
    assert list(d["pixel"]) == ["auroc", "f1max", "ap", "pro"]
    assert all(v is None for v in d["pixel"].values()) and d["image"]["auroc"] == 1.0
    assert mt.MetricsReport.from_json(report.to_json()).to_dict() == d


def test_report_on_normal_only_set_has_null_image_auroc():
    maps = np.zeros((2, 4, 4))
    d = mt.evaluate([0.1, 0.2], [0, 0], maps, np.zeros((2, 4, 4))).to_dict()
    assert d["image"] == {"auroc": None, "f1max": None, "ap": None}
