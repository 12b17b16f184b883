"""Command-line driver.

    ssanc validate <cfg>
    ssanc run <cfg> [--jobs N] [--out DIR] [--seed S]
    ssanc plot <results.csv> --out DIR

Exit status: 0 success, 1 config error, 2 at least one failed sweep point,
3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import Sequence

from .errors import ConfigError
from .experiment import config_problems, emit_plots, emit_results, load_config, read_csv, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_FAILED_ROWS, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("ssanc")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssanc", description="Constrained spatially selective ANC experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")

    r = sub.add_parser("run", help="run every sweep point of a config")
    r.add_argument("config")
    r.add_argument("--jobs", type=int, default=None, help="worker threads (default: CPU count)")
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    r.add_argument("--seed", type=int, default=None, help="scene seed (overrides the config)")

    pl = sub.add_parser("plot", help="redraw plots from a results.csv")
    pl.add_argument("results")
    pl.add_argument("--out", required=True)
    pl.add_argument("--sample-rate", type=float, default=16000.0, help="for the Delta axis in ms")
    return p


def _validate(args) -> int:
    cfg = load_config(args.config)
    problems = config_problems(cfg)
    for msg in problems:
        print(f"{args.config}: {msg}")
    if problems:
        return EXIT_CONFIG
    print(f"{args.config}: ok")
    return EXIT_OK


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.jobs is not None and args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    rows = run_experiment(cfg, jobs=args.jobs)
    paths = emit_results(rows, cfg.output_dir, cfg.scenes[0].sample_rate_hz)
    failed = [r for r in rows if r.failed]
    print(f"{len(rows)} sweep points, {len(failed)} failed; wrote {paths[0]}")
    for r in failed:
        print(f"  FAILED {r.scenario_id} delta={r.delta} l_a={r.l_a}: {r.error}", file=sys.stderr)
    return EXIT_FAILED_ROWS if failed else EXIT_OK


def _plot(args) -> int:
    rows = read_csv(args.results)
    paths = emit_plots(rows, args.out, args.sample_rate)
    print(f"wrote {len(paths)} plot(s) to {args.out}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"validate": _validate, "run": _run, "plot": _plot}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
