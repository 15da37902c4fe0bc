"""Command line entry point.

    dsmcd generate --config cfg.json --seed 0 --out data/
    dsmcd train    --config cfg.json --seed 0 --out runs/a --data data/
    dsmcd eval     --config cfg.json --out runs/a/eval --checkpoint runs/a/checkpoint --data data/
    dsmcd ablate   --config cfg.json --seed 0 --out runs/ablation --data data/
    dsmcd sweep-t  --config cfg.json --seed 0 --out runs/sweep --data data/ --t-values 0.05 0.1 0.5 1.0
    dsmcd report   --input runs/ --out figures/

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .decoder import SWEEP_TEMPERATURES
from .errors import ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _path(args, cfg, key, flag=None):
    value = getattr(args, key, None) or cfg.paths.get(key)
    if not value:
        raise ConfigError(f"missing path: pass --{flag or key} or set paths.{key} in the config")
    return value


def _common(p):
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--seed", type=int, help="overrides dataset and run seeds")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="dsmcd", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("generate", help="write a synthetic dataset"))

    p = sub.add_parser("train", help="train a detector")
    _common(p)
    p.add_argument("--data")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default=None)

    p = sub.add_parser("ablate", help="run the five task-gate combinations")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--split", default=None)

    p = sub.add_parser("sweep-t", help="train/evaluate per soft-threshold temperature")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--split", default=None)
    p.add_argument("--t-values", type=float, nargs="+", default=list(SWEEP_TEMPERATURES))

    p = sub.add_parser("report", help="render figures for run artifacts")
    _common(p)
    p.add_argument("--input", required=True, help="directory with run artifacts")
    return parser


def run(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cmd = args.command
    if cmd == "generate":
        summary = harness.cmd_generate(cfg.dataset, args.out)
        print(f"wrote {summary['train_tiles']}/{summary['val_tiles']}/{summary['test_tiles']} "
              f"train/val/test tiles to {args.out}")
    elif cmd == "train":
        res = harness.cmd_train(cfg.run, _path(args, cfg, "data"), args.out)
        print(f"trained {res.steps} steps; checkpoint in {res.out / 'checkpoint'}")
    elif cmd == "eval":
        split = args.split or cfg.run.eval_split
        res = harness.cmd_eval(_path(args, cfg, "checkpoint"), _path(args, cfg, "data"), split, args.out,
                               cfg.run.batch_size, cfg.run.hist_bins)
        print(res.report.to_json())
    elif cmd == "ablate":
        rows = harness.cmd_ablate(cfg.run, _path(args, cfg, "data"), args.out, args.split)
        print(f"wrote {len(rows)} ablation rows to {args.out}/ablation.csv")
    elif cmd == "sweep-t":
        index = harness.cmd_sweep_t(cfg.run, _path(args, cfg, "data"), args.out, args.t_values, args.split)
        for r in index:
            print(f"t={r['t']:g} near-zero mass {r['near_zero_mass']:.4f} -> {r['histogram']}")
    elif cmd == "report":
        from .plotting import render_report

        for p in render_report(args.input, args.out):
            print(p)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
