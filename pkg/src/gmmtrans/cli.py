"""Command-line entry point: ``gmmtrans <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ConfigError
from .evaluation import evaluate_pairs, latent_cluster_dump, translate_image
from .phantom import ROLES, PhantomSpec, build_dataset, load_manifest, load_pairs, load_phantom_spec
from .pngio import read_image, write_image
from .training import TrainConfig, load_checkpoint, select_k, train

THREADS_ENV = "GMMTRANS_THREADS"
log = logging.getLogger("gmmtrans")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


def _sha256(path) -> str:
    path = Path(path)
    return hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else ""


def _write_run_manifest(path, command, args, seed, outputs, started, config_text="", data_root=None):
    config_path = getattr(args, "config", None)
    record = {
        "command": command,
        "config_path": str(config_path) if config_path else "",
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest() if config_text else "",
        "dataset_manifest_hash": _sha256(Path(data_root) / "manifest.json") if data_root else "",
        "code_version": __version__,
        "seed": seed,
        "outputs": [str(o) for o in outputs],
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    Path(path).write_text(json.dumps(record, indent=2) + "\n")


def _train_config(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} does not exist")
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    try:
        config = TrainConfig.from_text(text, overrides)
        return config.validate()
    except ConfigError as exc:
        raise UsageError(f"invalid configuration; fields: {', '.join(exc.fields)}") from None


def _dataset_root(path):
    """Accept either a dataset root or one of its split directories; returns (root, role or None)."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return path, None
    if path.name in ROLES and (path.parent / "manifest.json").exists():
        return path.parent, path.name
    raise UsageError(f"{path} is not a dataset directory (no manifest.json)")


def cmd_dataset(args):
    started = time.time()
    try:
        spec = PhantomSpec(image_size=args.image_size, noise_sigma=args.noise_sigma,
                           vessel_intensity_shift=args.vessel_shift)
    except ConfigError as exc:
        raise UsageError(f"invalid phantom fields: {', '.join(exc.fields)}") from None
    out = Path(args.out)
    build_dataset(spec, args.train_a, args.train_b, args.val, args.test, out, args.seed)
    _write_run_manifest(out / "run_manifest.json", "dataset", args, args.seed, [out / "manifest.json"],
                        started, data_root=out)
    print(f"wrote {args.train_a + args.train_b} training images and {args.val + args.test} pairs to {out}")
    return 0


def cmd_train(args):
    started = time.time()
    config = _train_config(args)
    out = Path(args.out)
    root, _ = _dataset_root(args.data)
    train(root, config, out_dir=out, resume_from=args.resume)
    _write_run_manifest(out / "run_manifest.json", "train", args, config.seed,
                        [out / "final.ckpt", out / "loss_log.jsonl"], started, config.to_text(), root)
    (out / "config.cfg").write_text(config.to_text(), encoding="utf-8")
    print(f"trained {config.steps} steps; checkpoint {out / 'final.ckpt'}")
    return 0


def cmd_translate(args):
    started = time.time()
    ckpt = load_checkpoint(args.ckpt)
    image = read_image(args.input)
    result = translate_image(ckpt.bundle(), image, args.dir, args.stride)
    out = Path(args.out) if args.out else Path(args.input).with_name(f"{Path(args.input).stem}_{result.direction}.png")
    write_image(result.output, out)
    _write_run_manifest(out.with_name(out.name + ".run.json"), "translate", args, ckpt.config.seed, [out],
                        started, ckpt.config.to_text())
    print(f"wrote {out}")
    return 0


def cmd_eval(args):
    started = time.time()
    ckpt = load_checkpoint(args.ckpt)
    root, role = _dataset_root(args.data)
    role = role or args.split
    pairs = load_pairs(root, role)
    if not pairs:
        raise UsageError(f"split {role!r} has no paired images")
    spec = load_phantom_spec(root)
    threshold = spec.detection_threshold if args.threshold is None else args.threshold
    metrics = evaluate_pairs(ckpt.bundle(), pairs, args.dir, threshold, args.stride)
    metrics.update({"split": role, "direction": args.dir, "threshold": threshold})
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(f"metrics_{role}.json")
    out.write_text(json.dumps(metrics, indent=2) + "\n")
    _write_run_manifest(out.with_name(out.name + ".run.json"), "eval", args, ckpt.config.seed, [out],
                        started, ckpt.config.to_text(), root)
    for key, v in metrics["aggregate"].items():
        print(f"{key:>22}: {v['mean']:.4f} ± {v['std']:.4f}")
    return 0


def cmd_select_k(args):
    started = time.time()
    config = _train_config(args)
    try:
        grid = [int(k) for k in args.grid.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--grid must be a comma-separated list of integers, got {args.grid!r}") from None
    if not grid or any(k < 1 for k in grid):
        raise UsageError("--grid needs at least one K >= 1")
    root, _ = _dataset_root(args.data)
    best, table = select_k(root, config, grid, args.budget)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "select_k.json").write_text(json.dumps({"best_K": best, "table": table}, indent=2) + "\n")
    _write_run_manifest(out / "run_manifest.json", "select-k", args, config.seed, [out / "select_k.json"],
                        started, config.to_text(), root)
    print(f"{'K':>4} {'steps':>6} {'dice':>8} {'recall':>8} {'precision':>10} {'retention':>10}")
    for row in table:
        print(f"{row['K']:>4} {row['steps']:>6} {row['dice']:>8.4f} {row['recall']:>8.4f} "
              f"{row['precision']:>10.4f} {row['plaque_retention']:>10.4f}")
    print(f"best K = {best}")
    return 0


def cmd_dump_latent(args):
    started = time.time()
    ckpt = load_checkpoint(args.ckpt)
    root, role = _dataset_root(args.data)
    role = role or args.split
    pairs = load_pairs(root, role)
    if not pairs:
        raise UsageError(f"split {role!r} has no paired images")
    images = [p.image_a if args.domain == 1 else p.image_b for p in pairs]
    out = Path(args.out)
    rows = latent_cluster_dump(ckpt.bundle(), images, args.n, out, args.domain, args.seed,
                               [p.plaque_mask for p in pairs])
    _write_run_manifest(out.with_name(out.name + ".run.json"), "dump-latent", args, args.seed, [out],
                        started, ckpt.config.to_text(), root)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    for f in fields(TrainConfig):
        kind = type(getattr(TrainConfig(), f.name))
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                       help=f"override config key {f.name}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmmtrans", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help=f"torch worker threads (default: ${THREADS_ENV} or all cores)")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-a", type=int, default=70)
    p.add_argument("--train-b", type=int, default=70)
    p.add_argument("--val", type=int, default=10)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=PhantomSpec.image_size)
    p.add_argument("--noise-sigma", type=float, default=PhantomSpec.noise_sigma)
    p.add_argument("--vessel-shift", type=float, default=PhantomSpec.vessel_intensity_shift)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train a translation model")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--dir", choices=["1to2", "2to1"], default="1to2")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="fine-structure metrics on paired held-out images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset root or split directory")
    p.add_argument("--split", default="test", choices=["val", "test"])
    p.add_argument("--dir", choices=["1to2", "2to1"], default="1to2")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select-k", help="choose K by validation plaque Dice")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="1,8,25")
    p.add_argument("--budget", type=float, default=0.25, help="fraction of steps per K")
    p.add_argument("--out", default="select_k")
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("dump-latent", help="export patch component assignments as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["val", "test"])
    p.add_argument("--domain", type=int, choices=[1, 2], default=1)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_latent)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, os.cpu_count() or 1))
    torch.set_num_threads(max(1, threads))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gmmtrans {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"gmmtrans {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
