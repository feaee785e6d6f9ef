"""Command-line entry point: ``xforge <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, load_config

COMMANDS = ("train-classifier", "explain", "evaluate", "fuse", "optimize", "report", "run")


def _lr_grid(text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--lr-grid expects comma-separated numbers, got {text!r}") from None
    if not grid or any(v <= 0 for v in grid):
        raise argparse.ArgumentTypeError("--lr-grid needs at least one positive learning rate")
    return grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xforge", description="Baseline attributions, fusion and the explanation optimizer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train-classifier": "generate or load the dataset and train the classifier",
        "explain": "compute baseline attribution maps (XMAP) and PNG heatmaps",
        "evaluate": "draw perturbations and score the baseline maps",
        "fuse": "calibrate fusion weights and write Weighted Average maps",
        "optimize": "train the explanation optimizer and write its maps",
        "report": "headline table and box-plot data from persisted artifacts",
        "run": "all stages in order",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="config file (default: <out>/config.txt when present)")
        p.add_argument("--seed", type=int, help="run seed (data split, initializations, sampling)")
        p.add_argument("--out", help="run directory")
        if name in ("explain", "run"):
            p.add_argument("--methods", help="comma-separated method names, or 'all'")
            p.add_argument("--instances", type=int, help="number of test instances")
        if name in ("optimize", "run"):
            p.add_argument("--lr-grid", type=_lr_grid, help="comma-separated learning rates")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.out and (Path(args.out) / "config.txt").exists():
        cfg = load_config(Path(args.out) / "config.txt")
    else:
        cfg = RunConfig()
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    methods = getattr(args, "methods", None)
    if methods and methods != "all":
        cfg.set("attribution.methods", methods)
    if getattr(args, "instances", None) is not None:
        if args.instances < 1:
            raise ConfigError("--instances must be positive")
        cfg.set("evaluation.test_instances", args.instances)
    if getattr(args, "lr_grid", None):
        cfg.set("optimizer.lr_grid", args.lr_grid)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "train-classifier":
            ckpt = pipeline.train_classifier_stage(cfg)
            print(f"classifier test accuracy {ckpt.metrics.get('test_acc', float('nan')):.4f} -> {pipeline.RunPaths(cfg.out).classifier}")
        elif args.command == "explain":
            instances = pipeline.explain_stage(cfg, pipeline.validate_methods(cfg.attribution.methods))
            print(f"explained {len(instances)} instances -> {Path(cfg.out) / 'maps'}")
        elif args.command == "evaluate":
            pipeline.evaluate_stage(cfg)
            print(f"metric report -> {pipeline.RunPaths(cfg.out).metrics}")
        elif args.command == "fuse":
            w = pipeline.fuse_stage(cfg)
            print("weights: " + ", ".join(f"{m}={v:.3f}" for m, v in w.as_dict().items()))
        elif args.command == "optimize":
            res = pipeline.optimize_stage(cfg)
            print(f"optimizer best lr {res.best.lr:g} (epoch {res.best.best_epoch}) -> {pipeline.RunPaths(cfg.out).optimizer}")
        else:
            if args.command == "run":
                pipeline.validate_methods(cfg.attribution.methods)
                report = pipeline.run_all(cfg)
            else:
                report = pipeline.report_stage(cfg)
            print((pipeline.RunPaths(cfg.out).report / "report.md").read_text(), end="")
    except (ConfigError, ValueError, FileNotFoundError, pipeline.StageError, RuntimeError) as e:
        print(f"xforge {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
