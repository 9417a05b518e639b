"""``tokenad`` command line: train, eval, infer, gradcheck, synth."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import gradcheck, netpbm, pipeline, scoring
from .config import load_config
from .errors import DimensionError, TokenADError

log = logging.getLogger("tokenad")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    start = time.perf_counter()
    result = pipeline.run_training(cfg, emit=lambda line: print(line, file=sys.stderr, flush=True))
    pipeline.save_model(args.output, result.model, cfg)
    report_path = args.report or Path(str(args.output) + ".report.json")
    report_path.write_text(result.report.to_json(), encoding="utf-8")
    sys.stdout.write(result.report.to_json())
    log.info("checkpoint %s, report %s, %.1f s", args.output, report_path, time.perf_counter() - start)
    return 0


def cmd_eval(args) -> int:
    model, cfg = pipeline.load_model(args.checkpoint)
    rows = pipeline.read_manifest(args.manifest)
    images, labels, masks = pipeline.load_manifest_arrays(rows, cfg.backbone.image_size)
    sys.stdout.write(pipeline.evaluate_model(model, images, labels, masks).to_json())
    return 0


def cmd_infer(args) -> int:
    model, cfg = pipeline.load_model(args.checkpoint)
    image = netpbm.read_image(args.image)
    size = cfg.backbone.image_size
    if image.shape[1:] != (size, size):
        raise DimensionError(f"{args.image}: image is {image.shape[2]}x{image.shape[1]}, expected {size}x{size}")
    scores, maps = model.predict(image[None])
    netpbm.write_pgm(args.heatmap, scoring.normalize_heatmap(maps[0]))
    print(f"{scores[0]:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run(args.seed)
    status = "pass" if result.passed else "FAIL"
    print(f"gradcheck {status}: max relative error {result.max_error:.3e} "
          f"(worst {result.worst_param}[{result.worst_index}]) over {result.num_scalars} scalars "
          f"in {result.seconds:.1f} s; threshold {gradcheck.THRESHOLD:.0e}")
    return 0 if result.passed else 1


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.overrides)
    train_set, test_set = pipeline.build_split(cfg)
    written = pipeline.write_split(args.output, train_set, test_set)
    for split, path in written.items():
        print(f"{split}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenad", description="Token-based zero-shot anomaly detection on a toy ViT.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic families, write checkpoint and held-out report")
    _config_args(p)
    p.add_argument("output", type=Path, help="checkpoint path to write")
    p.add_argument("--report", type=Path, help="report JSON path (default: <output>.report.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print a metrics report for a manifest")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path, help="index.tsv with path, label, mask_path, family_id")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score one image and write its heatmap")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("image", type=Path, help="PPM or PGM input")
    p.add_argument("heatmap", type=Path, help="PGM output")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable scalar on a micro model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic train/test split as PPM/PGM plus index.tsv")
    _config_args(p)
    p.add_argument("output", type=Path, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TokenADError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
