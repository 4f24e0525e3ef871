"""Command-line entry point: ``cvflow [--config F] [--seed N] [--out DIR] <command> ...``.

On failure a single line ``error: <category>: <message>`` goes to stderr and
the exit code identifies the category.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn, pipeline
from .config import ConfigError, default_config, load_config
from .potentials import RankError
from .projection import ProjectionError
from .samplers import TrajectoryDivergenceError

EXIT_CODES = {"config": 2, "io": 3, "numerical": 4, "projection": 5, "internal": 1}


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="experiment config (JSON)")
    parser.add_argument("--experiment", choices=("circles2d", "mueller_brown"), default=default,
                        help="use the built-in defaults of this experiment when no --config is given")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument("--out", type=Path, default=default, help="run directory (overrides output_dir)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvflow", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", parents=[common], help="sample or synthesize a dataset")
    p.add_argument("--kind", choices=("unbiased", "abf"), default="unbiased")

    p = sub.add_parser("train-cv", parents=[common], help="train the autoencoder CV")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("train-flow", parents=[common], help="train a conditional flow model")
    p.add_argument("--name", help="model name (flow, unbiased, abf)")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("generate", parents=[common], help="generate samples for target CV values")
    p.add_argument("--z", type=float, nargs="+", help="target CV values")
    p.add_argument("--z-file", type=Path, help="CSV with one target per row (header z or z0,...)")
    p.add_argument("--name", action="append", help="model name(s) to use")
    p.add_argument("--project", action="store_true", help="also project onto the level-set")

    p = sub.add_parser("project", parents=[common], help="project a dataset CSV onto a level-set")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--z", type=float, nargs="+", required=True)

    sub.add_parser("evaluate", parents=[common], help="compute metric CSVs")

    p = sub.add_parser("reproduce", parents=[common], help="run a whole experiment")
    p.add_argument("experiment_name", choices=("circles2d", "mueller_brown"))
    return parser


def _read_z_file(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty z file")
    body = rows[1:] if not _is_number(rows[0][0]) else rows
    return [[float(v) for v in r] if len(r) > 1 else float(r[0]) for r in body if r]


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def _resolve_config(args):
    experiment = getattr(args, "experiment_name", None) or args.experiment
    if args.config is not None:
        cfg = load_config(args.config)
        if experiment and experiment != cfg.experiment:
            raise ConfigError(f"config is for {cfg.experiment!r}, not {experiment!r}")
    else:
        cfg = default_config(experiment or "circles2d")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    return dataclasses.replace(cfg, **changes).validate() if changes else cfg


def run(args) -> None:
    cfg = _resolve_config(args)
    run_dir = pipeline.Run(cfg.output_dir)
    cmd = args.command
    if cmd == "reproduce":
        pipeline.reproduce(cfg, run_dir)
        return
    for attr in ("data", "input", "z_file"):
        path = getattr(args, attr, None)
        if path is not None and not Path(path).is_file():
            raise FileNotFoundError(f"{path} does not exist")
    if cmd == "generate" and args.z is None and args.z_file is None and not cfg.generation.z_values:
        raise ConfigError("no target z values given")
    if cmd == "make-dataset":
        pipeline.make_dataset(cfg, run_dir, args.kind)
    elif cmd == "train-cv":
        pipeline.train_cv(cfg, run_dir, args.data)
    elif cmd == "train-flow":
        pipeline.train_flow_model(cfg, run_dir, args.name, args.data)
    elif cmd == "generate":
        z_values = args.z if args.z is not None else None
        if args.z_file is not None:
            z_values = _read_z_file(args.z_file)
        pipeline.generate_samples(cfg, run_dir, z_values, args.project, args.name)
    elif cmd == "project":
        z = args.z[0] if len(args.z) == 1 else args.z
        pipeline.project_file(cfg, run_dir, args.input, z)
    elif cmd == "evaluate":
        pipeline.evaluate(cfg, run_dir)
    run_dir.start(cfg)
    run_dir.write_manifest(cfg)


def _category(exc) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, ProjectionError):
        return "projection"
    if isinstance(exc, (nn.DivergenceError, TrajectoryDivergenceError, RankError, np.linalg.LinAlgError)):
        return "numerical"
    if isinstance(exc, (OSError, ValueError)):
        return "io"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except Exception as exc:  # noqa: BLE001 - converted to a one-line error
        cat = _category(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
