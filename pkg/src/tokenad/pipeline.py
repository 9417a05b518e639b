"""Glue between a RunConfig and the library: data, model, training, evaluation, checkpoints."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, metrics, netpbm, objective, synthdata
from .backbone import FrozenBackbone, init_frozen_backbone
from .config import RunConfig, parse_config
from .errors import CheckpointError, DimensionError, LoadError
from .model import AnomalyModel
from .numerics import ParameterStore

log = logging.getLogger(__name__)

CONFIG_KEY = "meta.config"


@dataclass
class TrainResult:
    model: AnomalyModel
    report: metrics.MetricsReport
    history: list[dict[str, float]]


def build_split(cfg: RunConfig):
    d = cfg.data
    return synthdata.make_split(d.n_families, d.per_family, d.anomaly_ratio, seed=cfg.data_seed,
                                image_size=cfg.backbone.image_size)


def build_model(cfg: RunConfig) -> AnomalyModel:
    vit = cfg.vit()
    weights = None
    if cfg.backbone.weights:
        raw = checkpoint.load(cfg.backbone.weights)
        weights = {k: v for k, v in raw.items() if k.startswith("backbone.")}
    backbone = init_frozen_backbone(vit, weights)
    return AnomalyModel.create(cfg.model(), param_seed=cfg.param_seed, backbone=backbone)


def evaluate_model(model: AnomalyModel, images, labels, masks) -> metrics.MetricsReport:
    scores, maps = model.predict(images)
    return metrics.evaluate(scores, labels, maps, masks)


def run_training(cfg: RunConfig, emit: Callable[[str], None] | None = None) -> TrainResult:
    train_set, test_set = build_split(cfg)
    synthdata.assert_disjoint(train_set, test_set)
    images, labels, masks = synthdata.stack(train_set)
    model = build_model(cfg)
    batches = objective.batch_stream(images, labels, masks, cfg.train.batch_size,
                                     np.random.default_rng(cfg.batch_seed))
    history = objective.train(model, batches, cfg.loss_config(), cfg.train_config(), emit=emit)
    report = evaluate_model(model, *synthdata.stack(test_set))
    return TrainResult(model, report, history)


# ---------------------------------------------------------------- checkpoints

def checkpoint_tensors(model: AnomalyModel, cfg: RunConfig) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.backbone.arrays().items():
        tensors[name] = arr
    for name, t in model.store.items():
        tensors[f"param.{name}"] = t.data
    tensors[CONFIG_KEY] = checkpoint.text_to_tensor(cfg.to_text())
    return tensors


def save_model(path, model: AnomalyModel, cfg: RunConfig) -> None:
    checkpoint.save(path, checkpoint_tensors(model, cfg))


def load_model(path) -> tuple[AnomalyModel, RunConfig]:
    tensors = checkpoint.load(path)
    if CONFIG_KEY not in tensors:
        raise CheckpointError(f"{path}: missing {CONFIG_KEY}")
    cfg = parse_config(checkpoint.tensor_to_text(tensors[CONFIG_KEY]))
    vit = cfg.vit()
    backbone = FrozenBackbone(vit, {k: v for k, v in tensors.items() if k.startswith("backbone.")})
    fresh = AnomalyModel.create(cfg.model(), param_seed=cfg.param_seed, backbone=backbone)
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    missing = set(fresh.store.names()) - set(params)
    extra = set(params) - set(fresh.store.names())
    if missing or extra:
        raise CheckpointError(f"{path}: parameter set mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
    fresh.store.load(params)
    return fresh, cfg


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRow:
    path: Path
    label: int
    mask_path: Path | None
    family_id: int


MANIFEST_HEADER = ("path", "label", "mask_path", "family_id")


def write_manifest(path, rows: list[ManifestRow]) -> None:
    base = Path(path).parent
    lines = ["\t".join(MANIFEST_HEADER)]
    for r in rows:
        mask = "" if r.mask_path is None else str(Path(r.mask_path).relative_to(base))
        lines.append(f"{Path(r.path).relative_to(base)}\t{r.label}\t{mask}\t{r.family_id}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    base = path.parent
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if lineno == 1 and tuple(cols) == MANIFEST_HEADER:
            continue
        if len(cols) != 4:
            raise LoadError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
        try:
            label, family = int(cols[1]), int(cols[3])
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: label and family_id must be integers") from exc
        if label not in (0, 1):
            raise LoadError(f"{path}:{lineno}: label must be 0 or 1")
        mask = base / cols[2] if cols[2] else None
        if label == 1 and mask is None:
            raise LoadError(f"{path}:{lineno}: anomalous sample without a mask")
        rows.append(ManifestRow(base / cols[0], label, mask, family))
    return rows


def load_manifest_arrays(rows: list[ManifestRow], image_size: int):
    images, labels, masks = [], [], []
    for r in rows:
        img = netpbm.read_image(r.path)
        if img.shape[1:] != (image_size, image_size):
            raise DimensionError(f"{r.path}: image is {img.shape[2]}x{img.shape[1]}, model expects {image_size}")
        if r.mask_path is not None:
            if not r.mask_path.exists():
                raise LoadError(f"{r.path}: mask file {r.mask_path} not found")
            m = netpbm.read_mask(r.mask_path)
            if m.shape != (image_size, image_size):
                raise DimensionError(f"{r.mask_path}: mask shape {m.shape} does not match image")
        else:
            m = np.zeros((image_size, image_size), dtype=np.uint8)
        images.append(img)
        labels.append(r.label)
        masks.append(m)
    if not images:
        raise LoadError("manifest lists no samples")
    return np.stack(images), np.array(labels, dtype=np.int64), np.stack(masks)


def write_split(out_dir, train_set, test_set) -> dict[str, Path]:
    out_dir = Path(out_dir)
    written = {}
    for split, samples in (("train", train_set), ("test", test_set)):
        d = out_dir / split
        (d / "images").mkdir(parents=True, exist_ok=True)
        (d / "masks").mkdir(parents=True, exist_ok=True)
        rows = []
        for s in samples:
            stem = f"f{s.family_id:03d}_{s.index:05d}"
            img_path = d / "images" / f"{stem}.ppm"
            netpbm.write_ppm(img_path, s.image)
            mask_path = None
            if s.label:
                mask_path = d / "masks" / f"{stem}.pgm"
                netpbm.write_pgm(mask_path, s.mask * 255)
            rows.append(ManifestRow(img_path, s.label, mask_path, s.family_id))
        write_manifest(d / "index.tsv", rows)
        written[split] = d / "index.tsv"
    return written
