"""One test per acceptance criterion; each prints a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` to see the lines
interleaved, or read them from the captured output of a full run.
"""
import time
import zlib

import numpy as np
import pytest

from test_metrics import ap_rank_walk, auroc_pairs, f1_exhaustive, pro_dense_sweep, random_instance
from tokenad import checkpoint, gradcheck, metrics, objective, pipeline, sca, scoring, synthdata
from tokenad import numerics as nx
from tokenad.config import RunConfig, parse_config
from tokenad.errors import CheckpointError
from tokenad.model import AnomalyModel
from tokenad.numerics import Tensor


@pytest.fixture
def verdict(capsys):
    def report(n: int, title: str, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        with capsys.disabled():
            line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}"
            line += f" [{detail}]" if detail else ""
            line += f" failed: {', '.join(failed)}" if failed else ""
            print("\n" + line, flush=True)
        assert ok, failed
    return report


def short_config(*overrides: str) -> RunConfig:
    return parse_config("", ["train.steps=2", "data.per_family=4", *overrides])


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_check(verdict):
    start = time.perf_counter()
    result = gradcheck.run(0)
    elapsed = time.perf_counter() - start
    verdict(1, "gradcheck on the micro config", {
        "max relative error < 1e-5": result.passed,
        "every scalar checked": result.num_scalars == micro_scalar_count(),
        "runtime < 60 s": elapsed < 60.0,
    }, f"err {result.max_error:.2e} at {result.worst_param}, {result.num_scalars} scalars, {elapsed:.1f} s")


def micro_scalar_count() -> int:
    model = AnomalyModel.create(gradcheck.micro_config(0), param_seed=1, dtype=np.float64)
    return sum(t.size for _, t in model.store.items())


# ---------------------------------------------------------------- 2

def test_criterion_2_frozen_backbone(verdict):
    cfg = RunConfig()
    train_set, _ = pipeline.build_split(cfg)
    model = pipeline.build_model(cfg)
    before = {name: zlib.crc32(arr.tobytes()) for name, arr in model.backbone.arrays().items()}
    stream = objective.batch_stream(*synthdata.stack(train_set), cfg.train.batch_size,
                                    np.random.default_rng(cfg.batch_seed))
    loss_cfg = cfg.loss_config()
    for step in range(100):
        objective.train_step(model, next(stream), loss_cfg, cfg.train.lr, step=step)
    after = {name: zlib.crc32(arr.tobytes()) for name, arr in model.backbone.arrays().items()}
    verdict(2, "backbone checksums unchanged after 100 steps", {
        "same tensor names": before.keys() == after.keys(),
        "bitwise identical": before == after,
        "no backbone tensor is trainable": not any(n.startswith("backbone.") for n in model.store.names()),
    }, f"{len(before)} tensors")


# ---------------------------------------------------------------- 3

def test_criterion_3_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(250):
        s, y = random_instance(rng, 50)
        for metric, oracle in ((metrics.auroc, auroc_pairs), (metrics.f1_max, f1_exhaustive),
                               (metrics.average_precision, ap_rank_walk)):
            worst = max(worst, abs(metric(s, y) - oracle(s, y)))
    pro_worst = 0.0
    for _ in range(40):
        masks = np.zeros((2, 8, 8), dtype=bool)
        r, c = rng.integers(0, 6, size=2)
        masks[0, r : r + 2, c : c + 3] = True
        masks[1, 6:, 0:2] = True
        maps = rng.normal(size=masks.shape) + masks
        pro_worst = max(pro_worst, abs(metrics.pro(maps, masks) - pro_dense_sweep(maps, masks)))
    verdict(3, "metrics equal brute-force oracles", {
        "AUROC/F1-max/AP within 1e-9 on 250 instances": worst < 1e-9,
        "PRO within 1e-6 on 8x8 maps": pro_worst < 1e-6,
    }, f"max diff {worst:.1e}, PRO {pro_worst:.1e}")


# ---------------------------------------------------------------- 4

def test_criterion_4_formula_units(verdict):
    rng = np.random.default_rng(4)
    bounded, antisym = True, True
    for _ in range(200):
        p, a, n = rng.normal(size=(10, 8)) * 3, rng.normal(size=8), rng.normal(size=8)
        s = scoring.patch_scores(Tensor(p), Tensor(a), Tensor(n)).data
        bounded &= bool(np.all(np.abs(s) <= 2.0))
        antisym &= bool(np.array_equal(scoring.patch_scores(Tensor(p), Tensor(n), Tensor(a)).data, -s))
    verdict(4, "formula unit checks", {
        "k = 2683 for 518x518": scoring.topk_count(518, 518) == 2683,
        "ctr(cos=0) = 0.5": abs(objective.ctr_from_cosine(0.0) - 0.5) < 1e-12,
        "ctr(cos=-0.5) = 0": objective.ctr_from_cosine(-0.5) == 0.0,
        "patch scores in [-2, 2]": bounded,
        "patch scores antisymmetric": antisym,
    })


# ---------------------------------------------------------------- 5

def test_criterion_5_ablation_structure(verdict):
    cfg = RunConfig()
    images = synthdata.stack(pipeline.build_split(short_config())[1][:6])[0]
    with_sca = pipeline.build_model(cfg)
    for name in with_sca.store.names():
        if name.endswith(".alpha"):
            with_sca.store[name].data[...] = 0.0
    plain = pipeline.build_model(parse_config("sca.enabled = false"))
    for name in plain.store.names():
        plain.store[name].data[...] = with_sca.store[name].data
    (sa, ma), (sb, mb) = with_sca.predict(images), plain.predict(images)
    identical = np.array_equal(ma, mb) and np.array_equal(sa, sb)

    completed = {}
    for m in (1, 2, 4, 8, 16, 32):
        rep = pipeline.run_training(short_config(f"sca.m={m}")).report
        completed[f"m={m}"] = rep.image["auroc"] is not None and np.isfinite(rep.image["auroc"])
    depth = cfg.backbone.depth
    for taps in ((depth,), (depth // 2, depth), tuple(range(depth // 4, depth + 1, depth // 4))):
        rep = pipeline.run_training(short_config("backbone.tap_layers=" + ",".join(map(str, taps)))).report
        completed[f"taps={taps}"] = rep.pixel["auroc"] is not None and np.isfinite(rep.pixel["auroc"])
    verdict(5, "ablation structure", {"alpha=0 equals SCA-disabled maps": identical, **completed},
            f"{len(completed)} sweep runs")


# ---------------------------------------------------------------- 6

def test_criterion_6_end_to_end_synthetic_run(verdict):
    cfg = RunConfig()
    start = time.perf_counter()
    result = pipeline.run_training(cfg)
    elapsed = time.perf_counter() - start
    rep = result.report
    final_cos = result.history[-1]["cos_an"]

    test_images, test_labels, test_masks = synthdata.stack(pipeline.build_split(cfg)[1])
    _, maps = result.model.predict(test_images[test_labels == 1])
    inside = np.mean([h[m > 0].mean() for h, m in zip(maps, test_masks[test_labels == 1])])
    outside = np.mean([h[m == 0].mean() for h, m in zip(maps, test_masks[test_labels == 1])])
    train_rep = pipeline.evaluate_model(result.model, *synthdata.stack(pipeline.build_split(cfg)[0]))
    verdict(6, "default zero-shot synthetic run", {
        "held-out image AUROC >= 0.85": rep.image["auroc"] >= 0.85,
        "held-out pixel AUROC >= 0.80": rep.pixel["auroc"] >= 0.80,
        "runtime <= 15 min": elapsed <= 900.0,
        "final token cosine <= 0": final_cos <= 0.0,
        "heatmap higher inside masks": inside > outside,
        "training-family image AUROC > 0.5": train_rep.image["auroc"] > 0.5,
    }, f"image {rep.image['auroc']:.3f}, pixel {rep.pixel['auroc']:.3f}, PRO {rep.pixel['pro']:.3f}, "
       f"cos {final_cos:.3f}, {elapsed:.0f} s")


# ---------------------------------------------------------------- 7

def test_criterion_7_determinism_and_persistence(verdict, tmp_path):
    cfg = parse_config("", ["train.steps=10", "data.per_family=8"])
    runs = [pipeline.run_training(cfg) for _ in range(2)]
    blobs = [checkpoint.encode(pipeline.checkpoint_tensors(r.model, cfg)) for r in runs]
    pipeline.save_model(tmp_path / "a.vadc", runs[0].model, cfg)
    model, loaded_cfg = pipeline.load_model(tmp_path / "a.vadc")
    pipeline.save_model(tmp_path / "b.vadc", model, loaded_cfg)
    corrupt = bytearray(blobs[0])
    corrupt[len(corrupt) // 2] ^= 0x01
    try:
        checkpoint.decode(bytes(corrupt))
        rejected = False
    except CheckpointError:
        rejected = True
    verdict(7, "determinism and persistence", {
        "identical checkpoints": blobs[0] == blobs[1],
        "identical reports": runs[0].report.to_json() == runs[1].report.to_json(),
        "save-load-save bit-exact": (tmp_path / "a.vadc").read_bytes() == (tmp_path / "b.vadc").read_bytes(),
        "loaded model reproduces report": pipeline.evaluate_model(
            model, *synthdata.stack(pipeline.build_split(cfg)[1])).to_json() == runs[0].report.to_json(),
        "CRC corruption rejected": rejected,
    }, f"{len(blobs[0])} bytes")


# ---------------------------------------------------------------- 8

def test_criterion_8_sca_invariants(verdict):
    cfg = RunConfig()
    model = pipeline.build_model(cfg).astype(np.float64)
    images = synthdata.stack(pipeline.build_split(short_config())[1][:2])[0]
    rng = np.random.default_rng(8)
    row_dev, perm_dev = 0.0, 0.0
    with nx.no_grad(), nx.precision(np.float64):
        taps = model.encode(images)
        for tap in taps:
            layer = sca.sca_layer_from_store(model.store, tap.layer, cfg.vit().num_patches, cfg.model().sca)
            out = sca.apply(layer, tap.patches, tap.t_a, tap.t_n)
            row_dev = max(row_dev, float(np.max(np.abs(out.attention.data.sum(axis=-1) - 1.0))))
            layer.pos_params["epos"].data[...] = 0.0
            base = sca.apply(layer, tap.patches, tap.t_a, tap.t_n)
            perm = rng.permutation(tap.patches.shape[1])
            shuffled = sca.apply(layer, Tensor(tap.patches.data[:, perm]), tap.t_a, tap.t_n)
            perm_dev = max(perm_dev, float(np.max(np.abs(shuffled.t_a.data - base.t_a.data))),
                           float(np.max(np.abs(shuffled.t_n.data - base.t_n.data))))
    verdict(8, "SCA invariants", {
        "attention rows sum to 1 within 1e-6": row_dev < 1e-6,
        "zero E_pos permutation invariance within 1e-6": perm_dev < 1e-6,
    }, f"row dev {row_dev:.1e}, permutation dev {perm_dev:.1e}")
