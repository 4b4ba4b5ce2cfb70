"""Command-line entry point: ``sdnet {synth,train,derain,eval,params}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig
from .model import VARIANTS, param_count, param_count_by_module, param_shapes
from .trainer import TrainingDiverged, image_metrics, predict, train

log = logging.getLogger("sdnet")


class CliError(Exception):
    pass


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(getattr(args, "config", None), _overrides(getattr(args, "set", None)))
    if getattr(args, "variant", None):
        cfg.set_variant(args.variant)
    if getattr(args, "branches", None) is not None:
        cfg.num_branches = args.branches
    return cfg


def _echo(cfg: RunConfig) -> None:
    for line in cfg.to_text().splitlines():
        log.info("config: %s", line)


def _model_from_checkpoint(args):
    params, _ = load_checkpoint(args.checkpoint)
    cfg = _run_config(args)
    model_cfg = cfg.model_config()
    expected = param_shapes(model_cfg)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise CliError(f"checkpoint {args.checkpoint} does not match the configured model "
                       "(pass the training --config)")
    return params, model_cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    manifest = data.build_dataset(args.backgrounds, args.out, args.n_train, args.n_test,
                                  seed=args.seed, streak_dir=args.streaks)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _echo(cfg)
    result = train(cfg, args.data, args.out, resume=args.resume)
    last = result.rows[-1] if result.rows else {}
    log.info("finished: loss %s, test psnr %s, test ssim %s", last.get("loss_total"),
             last.get("test_psnr") or "-", last.get("test_ssim") or "-")
    return 0


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in data.IMAGE_SUFFIXES)
        if not files:
            raise CliError(f"no images in {path}")
        return files
    if not path.exists():
        raise CliError(f"input not found: {path}")
    return [path]


def cmd_derain(args) -> int:
    params, model_cfg = _model_from_checkpoint(args)
    out_dir = Path(args.out)
    for src in _inputs(Path(args.input)):
        img = data.load_image(src)
        t0 = time.perf_counter()
        pred = predict(params, model_cfg, img)
        elapsed = time.perf_counter() - t0
        dst = out_dir / (src.stem + ".png")
        data.save_image(np.clip(pred, 0.0, 1.0), dst)
        log.info("%s -> %s (%dx%d, %.3fs)", src, dst, img.shape[1], img.shape[0], elapsed)
    return 0


def _fmt(x: float) -> str:
    return "inf" if x == float("inf") else f"{x:.6f}"


def cmd_eval(args) -> int:
    params, model_cfg = _model_from_checkpoint(args)
    records = data.split_records(data.read_manifest(args.data), args.split)
    rows = []
    for rec in records:
        pair = data.load_pair(rec)
        p, s = image_metrics(predict(params, model_cfg, pair.rainy), pair.clean)
        bp, bs = image_metrics(pair.rainy, pair.clean)
        rows.append((rec.id, p, s, bp, bs))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["id", "psnr", "ssim", "rainy_psnr", "rainy_ssim"])
        for rid, *vals in rows:
            writer.writerow([rid, *map(_fmt, vals)])
        means = [float(np.mean([r[i] for r in rows])) for i in range(1, 5)]
        writer.writerow(["mean", *map(_fmt, means)])
    finally:
        if out is not sys.stdout:
            out.close()
    log.info("%s split: psnr %.3f ssim %.4f (rainy input %.3f / %.4f)", args.split, *means)
    return 0


def cmd_params(args) -> int:
    model_cfg = _run_config(args).model_config()
    for name, n in param_count_by_module(model_cfg).items():
        print(f"{name}\t{n}")
    print(f"total\t{param_count(model_cfg)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _config_help() -> str:
    width = max(map(len, RunConfig.HELP))
    rows = [f"  {k.ljust(width)}  {RunConfig.HELP[k]} (default {getattr(RunConfig(), k)})"
            for k in RunConfig.keys()]
    return "config keys (for --config files and --set):\n" + "\n".join(rows)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of 'key = value' lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="skip-connection variant")
    p.add_argument("--branches", type=int, help="branches per multi-branch module")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="sdnet", description="Swin-based rain removal.",
                                     epilog=_config_help(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a paired rainy/clean dataset")
    p.add_argument("--backgrounds", required=True, help="directory of clean images")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--streaks", help="optional directory of streak images to use instead of procedural rain")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model", epilog=_config_help(), formatter_class=fmt)
    _add_model_args(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("derain", help="derain an image or a directory of images")
    _add_model_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_derain)

    p = sub.add_parser("eval", help="per-image and mean PSNR/SSIM on a split")
    _add_model_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter count per module")
    _add_model_args(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, CheckpointError, TrainingDiverged, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"sdnet {args.command}: error: {msg}", file=sys.stderr)
        return 1
