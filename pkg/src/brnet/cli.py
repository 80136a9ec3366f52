"""Command line entry point: ``brnet train|eval|ba-solve|sweep-beta``.

Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""
import argparse
import json
import sys
from dataclasses import fields, replace

import numpy as np

from . import core
from .harness import (
    ConfigError, ExperimentConfig, PRESETS, load_config, preset, run_ba_solve,
    run_eval, run_sweep, run_training,
)
from .network import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    group = p.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*names, dest=f"cfg_{f.name}", metavar=f.name.upper())


def _build_config(args, base=None):
    config = base or ExperimentConfig()
    if args.preset:
        config = replace(config, **PRESETS[args.preset])
    if args.config:
        config = load_config(args.config, config)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return config.updated(overrides)


def _floats(text):
    return [float(t) for t in text.replace(" ", "").split(",") if t]


def make_parser():
    parser = _Parser(prog="brnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a network and write per-epoch metrics")
    _add_config_flags(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "test"), default="test")
    _add_config_flags(p)

    p = sub.add_parser("ba-solve", help="solve a discrete rate-distortion problem")
    p.add_argument("utility", help="dense utility matrix, one context per row")
    p.add_argument("--px", type=_floats, help="context distribution (comma separated); uniform by default")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--tol", type=float, default=core.DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=core.DEFAULT_MAX_ITER)
    p.add_argument("--output", help="write the JSON report here instead of stdout")

    p = sub.add_parser("sweep-beta", help="one training run per beta; long-form CSV")
    p.add_argument("--betas", type=_floats, required=True, help="comma separated; 0 means umax")
    p.add_argument("--output", required=True)
    p.add_argument("--run-dir", default="", help="keep per-run metrics and checkpoints here")
    p.add_argument("--jobs", type=int, default=1)
    _add_config_flags(p)
    return parser


def _train(args):
    config = _build_config(args)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    result = run_training(config, log=log)
    if result.diverged:
        print(f"diverged: {result.message}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _eval(args):
    from .harness import load_checkpoint
    stored = load_checkpoint(args.checkpoint).config
    config = _build_config(args, stored)
    utility, error = run_eval(args.checkpoint, config, args.split)
    print(json.dumps({"split": args.split, "utility": utility, "error": error}))
    return EXIT_OK


def _ba_solve(args):
    from .harness import parse_matrix
    u = parse_matrix(args.utility)
    px = None if args.px is None else np.array(args.px)
    report = run_ba_solve(u, px, args.beta, args.tol, args.max_iter)
    text = json.dumps(report)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _sweep(args):
    config = _build_config(args, replace(ExperimentConfig(), epochs=50, mode="grdi"))
    rows = run_sweep(config, args.betas, args.output, args.run_dir, args.jobs)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"beta={r['beta']} {r['split']}: {r['status']}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"train": _train, "eval": _eval, "ba-solve": _ba_solve, "sweep-beta": _sweep}


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"brnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
