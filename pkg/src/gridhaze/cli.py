"""Command-line entry point: ``gridhaze {synth,train,dehaze,eval,ablate,gradcheck}``."""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import graph as G
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .haze import (
    DEPTH_KINDS,
    INDOOR_AIRLIGHT,
    INDOOR_BETA,
    DatasetManifest,
    load_pairs,
    synth_dataset,
    synthetic_scene,
)
from .network import VARIANTS, ConfigError, GridConfig, apply_ablation, build, reduced_config
from .pnm import ImageFormatError, read_image, write_image
from .trainer import TrainConfig, TrainingDiverged, evaluate, fit, predict_image, run_ablation_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_range(text: str) -> tuple[float, float]:
    """``lo:hi`` or a single value (degenerate range)."""
    parts = text.split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi or a number, got {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError(f"expected lo:hi with lo <= hi, got {text!r}")
    return vals[0], vals[1]


def parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid size must look like 3x6, got {text!r}") from None
    return r, c


def _csv(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _channels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in _csv(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"channels must be comma-separated integers, got {text!r}") from None


# --- parser -------------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=("reduced", "default"), default="reduced",
                   help="reduced: channels 4/8/16, growth 4; default: 16/32/64, growth 16")
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--channels", type=_channels, help="per-scale widths, e.g. 16,32,64")
    g.add_argument("--growth", type=int, help="dense growth rate")
    g.add_argument("--rdb-layers", type=int)
    g.add_argument("--variant", choices=sorted(VARIANTS), default="full")
    g.add_argument("--model-seed", type=int, default=0, help="parameter initialization seed")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--patch", type=int, default=64)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--halve-every", type=int, default=20, help="epochs between learning-rate halvings")
    g.add_argument("--epochs", type=int, default=1)
    g.add_argument("--max-steps", type=int)
    g.add_argument("--lam", type=float, default=0.04, help="perceptual loss weight")
    g.add_argument("--eval-every", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridhaze", description="Grid-network single-image dehazing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize hazy/depth pairs from clear images")
    p.add_argument("--clear-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--beta", type=parse_range, default=INDOOR_BETA, help="lo:hi scattering range")
    p.add_argument("--airlight", type=parse_range, default=INDOOR_AIRLIGHT, help="lo:hi airlight range")
    p.add_argument("--depth-kind", choices=DEPTH_KINDS, default="fractal")
    p.add_argument("--procedural", type=int, default=0, metavar="N",
                   help="first write N procedural clear scenes into --clear-dir")
    p.add_argument("--size", type=int, default=64, help="side length of procedural scenes")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a synthesized manifest")
    p.add_argument("--data", required=True, type=Path, help="training manifest.tsv")
    p.add_argument("--eval-data", type=Path, help="held-out manifest.tsv")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("dehaze", help="dehaze one image or a directory of images")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="PSNR/SSIM table over a manifest")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", type=Path, help="omit to score the hazy inputs")
    p.add_argument("--out", type=Path, help="also write the table as TSV")

    p = sub.add_parser("ablate", help="train variants and grid sizes under one budget")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--test-data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--variants", type=_csv, default=["full"])
    p.add_argument("--grid-sizes", type=lambda s: [parse_grid(t) for t in _csv(s)], default=[])
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--primitives-only", action="store_true")
    return parser


# --- helpers ------------------------------------------------------------------------------

def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")


def model_config(args) -> GridConfig:
    base = reduced_config() if args.preset == "reduced" else GridConfig()
    overrides = {}
    if args.rows is not None:
        overrides["rows"] = args.rows
        if args.channels is None:
            overrides["channels_per_scale"] = tuple(base.channels_per_scale[0] * 2**i for i in range(args.rows))
    if args.cols is not None:
        overrides["cols"] = args.cols
    if args.channels is not None:
        overrides["channels_per_scale"] = args.channels
    if args.growth is not None:
        overrides["growth_rate"] = args.growth
    if args.rdb_layers is not None:
        overrides["rdb_layers"] = args.rdb_layers
    if "rows" in overrides or "cols" in overrides:
        overrides["rdb_per_row"] = None
    return apply_ablation(replace(base, **overrides), args.variant)


def train_config(args, lam: float | None = None) -> TrainConfig:
    return TrainConfig(patch_size=args.patch, batch_size=args.batch, lr0=args.lr,
                       halve_every=args.halve_every, epochs=args.epochs, max_steps=args.max_steps,
                       seed=args.seed, lam=args.lam if lam is None else lam, eval_every=args.eval_every)


def _thread_limit():
    raw = os.environ.get("GRIDHAZE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GRIDHAZE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("GRIDHAZE_THREADS must be >= 0")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --- commands -----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.procedural:
        args.clear_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.procedural):
            scene = synthetic_scene(args.size, args.size, seed=int(np.random.default_rng([args.seed, i, 1]).integers(2**31)))
            write_image(scene, args.clear_dir / f"scene_{i:05d}.ppm")
    _require(args.clear_dir, "clear image directory")
    manifest = synth_dataset(args.clear_dir, args.out, args.count, args.beta, args.airlight,
                             args.depth_kind, args.seed)
    print(f"wrote {len(manifest)} pairs and {args.out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args.data, "manifest")
    if args.eval_data is not None:
        _require(args.eval_data, "manifest")
    pairs = load_pairs(args.data)
    eval_pairs = load_pairs(args.eval_data) if args.eval_data else None
    optimizer = None
    if args.resume is not None:
        _require(args.resume, "checkpoint")
        ck = load_checkpoint(args.resume)
        params, optimizer = ck.params, ck.optimizer
    else:
        params = build(model_config(args), args.model_seed)
    tc = train_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    params, log = fit(params, pairs, tc, eval_pairs=eval_pairs, checkpoint_dir=args.out, optimizer=optimizer)
    log.write(args.out / "train_log.tsv")
    if log.evals:
        (args.out / "eval_log.tsv").write_text(log.eval_text())
    final = log.steps[-1]
    print(f"trained {final.step} steps; final loss {final.loss:.6g}; checkpoint {args.out / 'last.gdhz'}")
    if log.evals:
        print(f"held-out PSNR {log.evals[-1].psnr:.2f} dB, SSIM {log.evals[-1].ssim:.4f}")
    return EXIT_OK


def cmd_dehaze(args) -> int:
    _require(args.ckpt, "checkpoint")
    _require(args.input, "input")
    params = load_checkpoint(args.ckpt).params
    if args.input.is_dir():
        files = sorted(p for p in args.input.iterdir() if p.suffix.lower() in (".ppm", ".pnm"))
        if not files:
            raise UsageError(f"no .ppm images in {args.input}")
        args.out.mkdir(parents=True, exist_ok=True)
        jobs = [(f, args.out / f.name) for f in files]
    else:
        jobs = [(args.input, args.out)]
    for src, dst in jobs:
        write_image(predict_image(params, read_image(src)), dst)
        print(f"{src} -> {dst}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args.data, "manifest")
    manifest = DatasetManifest.read(args.data)
    pairs = load_pairs(manifest)
    model = None
    if args.ckpt is not None:
        _require(args.ckpt, "checkpoint")
        model = load_checkpoint(args.ckpt).params
    res = evaluate(model, pairs)
    lines = ["image\tpsnr\tssim"]
    for rec, (p, s) in zip(manifest.records, res.per_image):
        lines.append(f"{Path(rec.hazy_path).name}\t{p:.4f}\t{s:.6f}")
    lines.append(f"mean\t{res.psnr:.4f}\t{res.ssim:.6f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out is not None:
        args.out.write_text(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    _require(args.data, "manifest")
    _require(args.test_data, "manifest")
    report = run_ablation_suite(model_config(args), load_pairs(args.data), load_pairs(args.test_data),
                                variants=args.variants, grid_sizes=args.grid_sizes,
                                train_config=train_config(args), model_seed=args.model_seed,
                                progress=lambda msg: print(msg, file=sys.stderr, flush=True))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.md").write_text(report.to_markdown())
    (args.out / "report.tsv").write_text(report.to_tsv())
    print(report.to_markdown())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_result, run_suite

    results = run_suite(seed=args.seed, include_network=not args.primitives_only,
                        report=lambda r: print(format_result(r), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "dehaze": cmd_dehaze,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}

RUNTIME_ERRORS = (ValueError, OSError, ImageFormatError, CheckpointError, G.ShapeError, ConfigError,
                  TrainingDiverged, FloatingPointError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gridhaze {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"gridhaze {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
