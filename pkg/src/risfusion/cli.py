"""Command-line entry point.

Exit codes: 0 success, 2 invalid input (bad arguments, files or configs),
3 runtime failure (training divergence, failed gradient check, I/O errors).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError, RisFusionError, ShapeError, TrainingError, ValidationError

log = logging.getLogger("risfusion")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class CommandFailed(Exception):
    """A command ran to completion but its verdict is failure (exit 3)."""


def _fuse(args) -> int:
    from .autodiff import no_grad
    from .checkpoint import load_checkpoint
    from .imaging import overlay_mask, read_image, write_image
    from .ris import binarize
    from .text import load_embedding, toy_embed

    model = load_checkpoint(args.ckpt)
    emb = toy_embed(args.text, model.config.text_dim) if args.text is not None else load_embedding(args.emb)
    ir, vis = read_image(args.ir), read_image(args.vis)
    if vis.shape[0] != 3:
        raise ShapeError(f"{args.vis}: visible image must be RGB, got {vis.shape[0]} channel(s)")
    if ir.shape[1:] != vis.shape[1:]:
        raise ShapeError(f"infrared {ir.shape[1:]} and visible {vis.shape[1:]} sizes differ")
    if ir.shape[1] % 8 or ir.shape[2] % 8:
        raise ShapeError(f"image size {ir.shape[1]}x{ir.shape[2]} must be divisible by 8")
    with no_grad():
        pred = model(vis, ir, [emb])
    fused = pred.fused.rgb.data[0]
    write_image(fused, args.out)
    mask = binarize(pred.mask.prob, args.threshold)[0, 0]
    if args.overlay is not None:
        write_image(overlay_mask(fused, mask), args.overlay)
    print(f"wrote {args.out} ({int(mask.sum())} mask pixels for {emb.expression!r})")
    return EXIT_OK


def _train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import read_manifest
    from .reporting import config_hash
    from .train import TrainConfig, train

    config = TrainConfig.from_file(args.config)
    data = read_manifest(args.data)
    every = max(1, config.steps // 10)

    def progress(rec):
        if rec["step"] % every == 0 or rec["step"] == 1:
            log.info("step %d  L_total %.4f  L_seg %.4f  L_fuse %.4f", rec["step"], rec["L_total"], rec["L_seg"],
                     rec["L_fuse"])

    result = train(config, data, log_path=args.log, callback=progress)
    save_checkpoint(result.model, args.out_ckpt)
    losses = result.final_losses()
    print(f"trained {config.steps} steps on {len(data)} samples in {result.seconds:.1f}s "
          f"(config {config_hash(config.to_dict())})")
    print("final " + "  ".join(f"{k}={v:.4f}" for k, v in losses.items()))
    return EXIT_OK


def _eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_manifest
    from .reporting import report_table
    from .train import evaluate, prepare

    model = load_checkpoint(args.ckpt)
    data = read_manifest(args.data)
    if args.size is not None:
        data = prepare(data, args.size)
    report = evaluate(model, data, args.threshold)
    if args.report is not None:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    sys.stdout.write(report_table([(args.label or Path(args.ckpt).stem, report)], fmt=args.format))
    return EXIT_OK


def _gradcheck(args) -> int:
    from . import checks

    start = time.perf_counter()
    report = checks.run(args.module, seed=args.seed)
    print(report if args.verbose else report.__str__().splitlines()[-1])
    failures = report.failures()
    for name, err in failures.items():
        print(f"FAIL {name}: {err:.3e}")
    print(f"{'PASS' if report.passed else 'FAIL'} gradcheck --module {args.module} "
          f"({len(report.errors)} blocks, {time.perf_counter() - start:.1f}s)")
    if not report.passed:
        raise CommandFailed(f"{len(failures)} gradient blocks exceed tolerance {report.tolerance:g}")
    return EXIT_OK


def _make_toy_data(args) -> int:
    from .data import make_toy_split, write_manifest

    n_test = args.n // 4 if args.n_test is None else args.n_test
    if n_test < 0:
        raise ValidationError(f"--n-test must be >= 0, got {n_test}")
    train_set, test_set = make_toy_split(args.n, max(n_test, 1), args.size, args.seed, args.variant, args.text_dim)
    out = Path(args.out)
    path = write_manifest(train_set, out, "train.jsonl")
    print(f"wrote {len(train_set)} samples to {path}")
    if n_test:
        path = write_manifest(test_set, out, "test.jsonl")
        print(f"wrote {len(test_set)} samples to {path}")
    return EXIT_OK


def _split_regions(args) -> int:
    from .data import split_regions
    from .imaging import read_image, write_image

    img = read_image(args.mask)
    if img.shape[0] != 1:
        raise ShapeError(f"{args.mask}: expected a single-channel mask, got {img.shape[0]} channels")
    values = np.unique(img)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ValidationError(f"{args.mask}: mask must be binary (0 or 255), found {len(values)} levels")
    regions = split_regions(img[0] > 0.5, args.connectivity)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".png" if Path(args.mask).suffix.lower() == ".png" else ".pgm"
    for k, region in enumerate(regions):
        write_image(region.astype(np.float64), out / f"region_{k:03d}{ext}")
    print(f"{len(regions)} region(s) written to {out}")
    return EXIT_OK


def _report(args) -> int:
    from .metrics import MetricsReport
    from .reporting import ABLATION_COLUMNS, FULL_COLUMNS, report_table

    rows = []
    for path in args.reports:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            report = MetricsReport.from_dict(d.get("metrics", d))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a metrics report ({exc})") from exc
        rows.append((Path(path).stem, report))
    columns = ABLATION_COLUMNS if args.columns == "ablation" else FULL_COLUMNS
    sys.stdout.write(report_table(rows, columns, fmt=args.format))
    return EXIT_OK


def _ablation(args) -> int:
    from dataclasses import replace

    from .data import read_manifest
    from .reporting import ablation_run
    from .train import TrainConfig

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    train_set, test_set = read_manifest(args.train), read_manifest(args.test)
    result = ablation_run(config, train_set, test_set, args.seeds, progress=log.info)
    sys.stdout.write(result.table(args.format))
    if args.summary is not None:
        payload = {"ordering_holds": result.ordering_holds(),
                   "runs": [s.to_dict() for row in result.rows for s in row.summaries]}
        Path(args.summary).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"ordering {'holds' if result.ordering_holds() else 'violated'}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .checks import MODULES
    from .data import VARIANTS
    from .reporting import FORMATS

    parser = argparse.ArgumentParser(prog="risfusion", description="Text-driven infrared/visible fusion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("fuse", help="fuse one IR/VIS pair and segment the referred object")
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--emb", help="TEB embedding file")
    src.add_argument("--text", help="expression, embedded with the toy embedder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="fused RGB image (.png/.ppm)")
    p.add_argument("--overlay", help="fused image with the predicted mask tinted red")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_fuse)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="TOML or JSON training config")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--log", required=True, help="JSONL loss log, one record per step")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", help="write the metrics report as JSON")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--size", type=int, help="resize samples before evaluation")
    p.add_argument("--label", help="row label in the printed table")
    p.add_argument("--format", choices=FORMATS, default="text")
    p.set_defaults(func=_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", choices=MODULES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_gradcheck)

    p = sub.add_parser("make-toy-data", help="write a synthetic train/test manifest pair")
    p.add_argument("--n", type=int, required=True, help="training samples")
    p.add_argument("--n-test", type=int, help="test samples (default n // 4)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="single")
    p.add_argument("--text-dim", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_make_toy_data)

    p = sub.add_parser("split-regions", help="write one mask per connected component")
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.set_defaults(func=_split_regions)

    p = sub.add_parser("report", help="comparison table from metrics report JSON files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--columns", choices=("full", "ablation"), default="full")
    p.add_argument("--format", choices=FORMATS, default="text")
    p.set_defaults(func=_report)

    p = sub.add_parser("ablation", help="train and evaluate the 2x2 fusion/joint-optimisation grid")
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--test", required=True, help="test manifest")
    p.add_argument("--config", help="base TOML or JSON training config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int)
    p.add_argument("--summary", help="write per-run summaries as JSON")
    p.add_argument("--format", choices=FORMATS, default="text")
    p.set_defaults(func=_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValidationError, ShapeError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, NonFiniteError, CommandFailed, RisFusionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
