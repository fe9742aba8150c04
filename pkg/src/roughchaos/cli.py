"""Command line entry point ``rough-chaos``.

Exit codes: 0 success, 2 configuration error, 3 more than 5% of the
replication units aborted (result files are still written).  The worker count
is taken from ``--workers``, else from ``ROUGH_CHAOS_WORKERS``, else from the
config file.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import EXPERIMENTS, ConfigError, load_config
from .experiments import ABORT_LIMIT, run_experiment
from .report import emit

WORKERS_ENV = "ROUGH_CHAOS_WORKERS"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rough-chaos", description=__doc__.splitlines()[0])
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, help=f"worker processes (overrides {WORKERS_ENV})")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--format", choices=("csv", "json"), help="table format")
    parser.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    return parser


def _workers_from_env():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if config.experiment != args.experiment:
            raise ConfigError(f"config declares experiment {config.experiment!r}, command is {args.experiment!r}")
        workers = args.workers if args.workers is not None else _workers_from_env()
        config = config.with_overrides(seed=args.seed, workers=workers, output=args.out, format=args.format)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    result = run_experiment(config)
    try:
        out = emit(result, figures=not args.no_figures)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(f"== {config.experiment}: {len(result.rows)} rows written to {out}")
    for rec in result.fits:
        if rec.status == "ok":
            print(f"fit {rec.metric}: slope={rec.slope:.4f} intercept={rec.intercept:.4f} r2={rec.r_squared:.4f}")
        else:
            print(f"fit {rec.metric}: {rec.status}")
    frac = result.aborted_fraction
    print(f"aborted units: {frac:.2%}")
    if frac > ABORT_LIMIT:
        print(f"error: more than {ABORT_LIMIT:.0%} of replications aborted", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
