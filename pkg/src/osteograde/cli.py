"""Command-line entry point.

Subcommands: synth, split, train, eval, gradcam, report. Failures print a
single machine-parseable line ``ERROR:<code>:<message>`` on stderr with
exit codes 2 (usage), 3 (data), 4 (config), 5 (numeric).
"""

from __future__ import annotations

import argparse
import os
import secrets
import sys

import numpy as np

from .data import DEFAULT_RATIOS, load_manifest, save_manifest, stratified_split, synth_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    OsteogradeError,
)
from .gradcam import DEFAULT_LAYER, gradcam, render_overlay
from .imageio import draw_digits, read_pgm, write_png, DIGIT_H, DIGIT_W
from .metrics import ConfusionMatrix, read_confusion_csv, write_confusion_csv, write_report_csv
from .runconfig import parse_run_config
from .training import evaluate_checkpoint, load_checkpoint, model_from_checkpoint, train

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONFIG = 4
EXIT_NUMERIC = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line usage errors
        print(f"ERROR:{EXIT_USAGE}:{message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = secrets.randbits(31)
        print(f"seed: {seed} (generated; pass --seed {seed} to reproduce)")
    return seed


def _parse_ratios(raw: str) -> tuple[float, float, float]:
    parts = raw.split(":")
    if len(parts) != 3:
        raise ConfigError(f"ratios must look like 7:2:1, got {raw!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as e:
        raise ConfigError(f"ratios must be numeric, got {raw!r}") from e


def render_confusion(cm: ConfusionMatrix, path) -> None:
    """Draw the 5x5 grid as a PNG: row-normalized cell shading, counts
    printed per cell, predicted grades down the side, true grades across."""
    k = cm.k
    arr = cm.as_array()
    cell, margin, scale = 48, 18, 1
    size_y = margin + k * cell
    size_x = margin + k * cell
    canvas = np.full((size_y, size_x, 3), 255, dtype=np.uint8)
    dark = np.array([16, 40, 120], dtype=np.float64)
    row_sums = arr.sum(axis=1)
    for p in range(k):
        for t in range(k):
            frac = arr[p, t] / row_sums[p] if row_sums[p] > 0 else 0.0
            color = np.round(255 * (1 - frac) + dark * frac).astype(np.uint8)
            y0, x0 = margin + p * cell, margin + t * cell
            canvas[y0 : y0 + cell - 1, x0 : x0 + cell - 1] = color
            text = str(int(arr[p, t]))
            tw = len(text) * (DIGIT_W + 1) * scale - scale
            ink = (255, 255, 255) if frac > 0.5 else (0, 0, 0)
            draw_digits(
                canvas,
                text,
                y0 + (cell - DIGIT_H * scale) // 2,
                x0 + max(1, (cell - tw) // 2),
                ink,
                scale,
            )
    for g in range(k):  # axis labels: rows predicted, columns true
        draw_digits(canvas, str(g), margin + g * cell + (cell - DIGIT_H) // 2, 5, (0, 0, 0))
        draw_digits(canvas, str(g), 5, margin + g * cell + (cell - DIGIT_W) // 2, (0, 0, 0))
    write_png(path, canvas)


def _cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    manifest, _ = synth_dataset(args.out, args.per_grade, seed, size=args.size)
    print(f"wrote {len(manifest)} images and {os.path.join(args.out, 'manifest.csv')}")
    return 0


def _cmd_split(args) -> int:
    seed = _resolve_seed(args.seed)
    manifest = load_manifest(args.manifest)
    ratios = _parse_ratios(args.ratios)
    split = stratified_split(manifest, ratios=ratios, seed=seed, group_by_patient=args.group_by == "patient")
    out = args.out or args.manifest
    save_manifest(split, out)
    counts = {s: len(split.for_split(s)) for s in ("train", "test", "val")}
    print(f"split {len(split)} records -> train {counts['train']}, test {counts['test']}, val {counts['val']}")
    print(f"wrote {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    result = train(
        cfg,
        out_dir=args.out,
        resume=args.resume,
        hash_mismatch="warn" if args.allow_config_mismatch else "fail",
        progress=True,
    )
    print(f"best val accuracy {result.best_val_acc:.10g} (epoch {result.best_epoch})")
    print(f"checkpoints: {result.last_path} / {result.best_path}; log: {result.log_path}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    report, cm = evaluate_checkpoint(args.checkpoint, manifest, args.split)
    write_report_csv(report, args.report)
    confusion_path = os.path.splitext(args.report)[0] + "_confusion.csv"
    write_confusion_csv(cm, confusion_path)
    print(f"accuracy {report.accuracy:.10g}")
    print(f"mae {report.mae:.10g}")
    print(f"qwk {report.qwk:.10g}")
    print(f"wrote {args.report} and {confusion_path}")
    return 0


def _cmd_gradcam(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    os.makedirs(args.out, exist_ok=True)
    from .data import load_image

    for image_path in args.image:
        tensor = load_image(image_path, cfg.data.image_size, cfg.data.channels)
        heat = gradcam(model, tensor, args.target_class, args.layer)
        raw = read_pgm(image_path)
        display = (raw >> 8).astype(np.uint8) if raw.dtype == np.uint16 else raw
        overlay = render_overlay(heat, display, args.alpha)
        stem = os.path.splitext(os.path.basename(image_path))[0]
        out_path = os.path.join(args.out, f"{stem}_grade{args.target_class}_{args.layer.replace('.', '-')}.png")
        write_png(out_path, overlay)
        print(f"wrote {out_path}")
    return 0


def _cmd_report(args) -> int:
    cm = read_confusion_csv(args.confusion)
    render_confusion(cm, args.render)
    print(f"wrote {args.render}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(
        prog="osteograde",
        description="Severity grading pipeline: synthesize data, split, train, evaluate, explain.",
        epilog="exit codes: 2 usage, 3 data, 4 config, 5 numeric",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-grade", type=int, required=True, help="images per grade")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("split", help="assign train/test/val splits to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default=":".join(str(r) for r in DEFAULT_RATIOS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--group-by", choices=["patient"], default=None)
    p.add_argument("--out", default=None, help="output manifest (default: rewrite input)")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train from a run config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and log")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "val"])
    p.add_argument("--report", required=True, help="metrics CSV output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcam", help="write class-activation overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+", help="input PGM image(s)")
    p.add_argument("--class", dest="target_class", type=int, required=True)
    p.add_argument("--layer", default=DEFAULT_LAYER)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=_cmd_gradcam)

    p = sub.add_parser("report", help="render a confusion-matrix CSV as an image")
    p.add_argument("--confusion", required=True)
    p.add_argument("--render", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DimensionError) as e:
        print(f"ERROR:{EXIT_CONFIG}:{e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"ERROR:{EXIT_NUMERIC}:{e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, KeyError, OsteogradeError) as e:
        msg = e.args[0] if e.args else e
        print(f"ERROR:{EXIT_DATA}:{msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
