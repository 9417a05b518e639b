import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_images, tiny_model
from tokenad import numerics as nx
from tokenad import scoring
from tokenad.errors import ConfigError, DimensionError, NormalizationError
from tokenad.numerics import ParameterStore, Tensor

vec = hnp.arrays(np.float64, (6,), elements=st.floats(-5, 5, allow_nan=False))
maps = hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-3, 3, allow_nan=False))


def saf_layer(d=4, seed=0):
    store = ParameterStore()
    return scoring.init_saf_layer(store, 1, d, np.random.default_rng(seed), dtype=np.float64), store


def nonzero(v):
    return np.linalg.norm(v) > 1e-3


# ---------------------------------------------------------------- recalibrate

def test_zero_weights_give_constant_bias_output():
    layer, _ = saf_layer()
    layer.w1.data[...] = 0
    layer.w2.data[...] = 0
    layer.b2.data[...] = [1.0, -2.0, 0.5, 3.0]
    out = scoring.recalibrate(layer, Tensor(np.random.default_rng(1).normal(size=(5, 4))))
    assert np.all(out.data == layer.b2.data)


def test_identity_weights_are_near_linear_for_small_inputs():
    layer, _ = saf_layer()
    layer.w1.data[...] = np.eye(4)
    layer.w2.data[...] = np.eye(4)
    x = np.random.default_rng(2).normal(size=(3, 4)) * 1e-4
    # gelu(x) ~ x/2 near zero
    assert np.allclose(scoring.recalibrate(layer, Tensor(x)).data, x / 2, rtol=1e-3)


def test_hidden_width_equals_input_width():
    layer, store = saf_layer(d=6)
    assert layer.w1.shape == layer.w2.shape == (6, 6)
    assert set(store.names()) == {"saf.L1.w1", "saf.L1.b1", "saf.L1.w2", "saf.L1.b2"}


def test_recalibrate_gradient_wrt_first_weight(f64):
    layer, _ = saf_layer(seed=5)
    x = Tensor(np.random.default_rng(6).normal(size=(5, 4)))
    base = layer.w1.data.copy()

    def f(w):
        layer.w1 = nx.reshape(w, (4, 4))
        return nx.sum(nx.pow(scoring.recalibrate(layer, x), 2.0))

    assert nx.finite_diff_check(f, base.reshape(-1)) < 1e-6


# ---------------------------------------------------------------- patch scores

def test_equal_tokens_give_zero_scores():
    p = Tensor(np.random.default_rng(0).normal(size=(7, 6)))
    t = Tensor(np.random.default_rng(1).normal(size=6))
    assert np.all(scoring.patch_scores(p, t, t).data == 0)


def test_parallel_and_orthogonal_gives_one():
    p = Tensor(np.array([[2.0, 0.0, 0.0]]))
    assert scoring.patch_scores(p, Tensor([1.0, 0.0, 0.0]), Tensor([0.0, 3.0, 0.0])).data[0] == pytest.approx(1.0)


@given(st.lists(vec, min_size=1, max_size=5), vec, vec)
def test_scores_bounded_and_antisymmetric(rows, a, n):
    if not (nonzero(a) and nonzero(n) and all(nonzero(r) for r in rows)):
        return
    p = Tensor(np.array(rows))
    s = scoring.patch_scores(p, Tensor(a), Tensor(n)).data
    swapped = scoring.patch_scores(p, Tensor(n), Tensor(a)).data
    assert np.all(np.abs(s) <= 2.0 + 1e-12)
    assert np.array_equal(swapped, -s)


def test_zero_token_raises():
    with pytest.raises(NormalizationError, match="anomaly token"):
        scoring.patch_scores(Tensor(np.ones((2, 3))), Tensor(np.zeros(3)), Tensor(np.ones(3)))


def test_batched_scores_match_per_image():
    rng = np.random.default_rng(3)
    p, a, n = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    batched = scoring.patch_scores(Tensor(p), Tensor(a), Tensor(n)).data
    for i in range(2):
        assert np.allclose(batched[i], scoring.patch_scores(Tensor(p[i]), Tensor(a[i]), Tensor(n[i])).data)


# ---------------------------------------------------------------- upsampling

def test_one_by_two_to_one_by_four():
    out = scoring.upsample_bilinear(Tensor(np.array([[0.0, 1.0]]), dtype=np.float64), (1, 4)).data
    assert np.allclose(out, [[0, 1 / 3, 2 / 3, 1]], atol=1e-15)


@given(st.floats(-5, 5), st.integers(1, 4), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9))
def test_constant_map_stays_constant(c, h, w, th, tw):
    out = scoring.upsample_bilinear(Tensor(np.full((h, w), c)), (th, tw)).data
    assert out.shape == (th, tw) and np.allclose(out, c, atol=1e-12)


@given(maps, st.integers(1, 12), st.integers(1, 12))
def test_upsampled_range_within_input_range(m, th, tw):
    out = scoring.upsample_bilinear(Tensor(m), (th, tw)).data
    assert out.min() >= m.min() - 1e-12 and out.max() <= m.max() + 1e-12


def test_corners_are_preserved():
    m = np.random.default_rng(0).normal(size=(3, 4))
    out = scoring.upsample_bilinear(Tensor(m), (7, 9)).data
    assert np.allclose(out[[0, 0, -1, -1], [0, -1, 0, -1]], m[[0, 0, -1, -1], [0, -1, 0, -1]])


def test_bilinear_matches_scipy_reference():
    from scipy.interpolate import RegularGridInterpolator

    m = np.random.default_rng(1).normal(size=(4, 5))
    out = scoring.upsample_bilinear(Tensor(m), (13, 11)).data
    interp = RegularGridInterpolator((np.linspace(0, 1, 4), np.linspace(0, 1, 5)), m)
    yy, xx = np.meshgrid(np.linspace(0, 1, 13), np.linspace(0, 1, 11), indexing="ij")
    assert np.allclose(out, interp(np.stack([yy, xx], axis=-1)), atol=1e-12)


def test_zero_size_target():
    with pytest.raises(DimensionError):
        scoring.upsample_bilinear(Tensor(np.ones((2, 2))), (0, 4))


# ---------------------------------------------------------------- fusion and top-k

def test_fuse_single_layer_and_zeros():
    m = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
    assert np.array_equal(scoring.fuse([m], (8, 8)).data, scoring.upsample_bilinear(m, (8, 8)).data)
    assert np.all(scoring.fuse([Tensor(np.zeros((4, 4)))] * 3, (8, 8)).data == 0)


def test_fuse_empty_is_config_error():
    with pytest.raises(ConfigError):
        scoring.fuse([], (8, 8))


@given(st.lists(hnp.arrays(np.float64, (4, 4), elements=st.floats(-2, 2)), min_size=4, max_size=4))
def test_four_layer_fusion_bounded(layers):
    out = scoring.fuse([Tensor(x) for x in layers], (16, 16)).data
    assert np.all(np.abs(out) <= 8.0 + 1e-12)


@pytest.mark.parametrize("h,w,k", [(518, 518, 2683), (64, 64, 40), (16, 16, 2), (5, 5, 1), (1, 1, 1)])
def test_topk_count(h, w, k):
    assert scoring.topk_count(h, w) == k


def test_image_score_examples():
    s, k = scoring.image_score(Tensor(np.array([[4.0, 3.0], [2.0, 1.0]])))
    assert k == 1 and s.item() == 4.0  # 1% of 4 pixels floors to 0, clamped to 1
    flat = Tensor(np.array([4.0, 3.0, 2.0, 1.0]))
    assert nx.topk_mean(flat, 2).item() == 3.5


@given(hnp.arrays(np.float64, (12, 12), elements=st.floats(-3, 3, allow_nan=False)),
       st.integers(0, 143), st.floats(0, 5))
def test_image_score_monotone_and_order_independent(h, idx, bump):
    s0 = scoring.image_score(Tensor(h))[0].item()
    raised = h.copy()
    raised.flat[idx] += bump
    assert scoring.image_score(Tensor(raised))[0].item() >= s0
    perm = np.random.default_rng(idx).permutation(144)
    assert scoring.image_score(Tensor(h.reshape(-1)[perm].reshape(12, 12)))[0].item() == pytest.approx(s0, abs=1e-12)


def test_model_antisymmetry_under_token_swap():
    model = tiny_model(sca_enabled=False)
    out = model.predict(random_images(2))
    s = model.store
    for a, n in (("token.anomaly", "token.normal"), ("token.pos_anomaly", "token.pos_normal")):
        s[a].data, s[n].data = s[n].data.copy(), s[a].data.copy()
    swapped = model.predict(random_images(2))
    assert np.allclose(swapped[1], -out[1], atol=1e-12)


def test_model_maps_bounded_by_layer_count():
    model = tiny_model()
    _, heat = model.predict(random_images(3))
    assert heat.shape == (3, 16, 16) and np.all(np.abs(heat) <= 2 * 2)


def test_normalize_heatmap():
    h = np.array([[0.0, 0.5], [1.0, 0.25]])
    out = scoring.normalize_heatmap(h)
    assert out.dtype == np.uint8 and out.min() == 0 and out.max() == 255
    assert np.all(scoring.normalize_heatmap(np.full((3, 3), 2.0)) == 0)
