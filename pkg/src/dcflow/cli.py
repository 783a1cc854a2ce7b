"""Command-line entry point: ``dcflow run | compare | dump-samples | validate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, bundled_configs, load_config, resolve_output_dir
from .flow import load_state
from .potentials import build_potential
from .runner import compare_runs, run_experiment, single_threaded, write_samples

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _cmd_run(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    outdir = resolve_output_dir(cfg, args.output_dir)
    result = run_experiment(cfg, outdir, progress=not args.quiet)
    print(f"{result.status}: {len(result.records)} iterations written to {outdir}")
    if result.status == "diverged":
        print(f"divergence: {result.error}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    try:
        build_potential(cfg.target, cfg.seed)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"target.params: {exc}") from exc
    print(f"ok: {cfg.name} ({cfg.scheme}, target {cfg.target['name']}, seed {cfg.seed})")
    return EXIT_OK


def _cmd_compare(args) -> int:
    rows = compare_runs(args.run_dirs, args.out)
    cols = list(rows[0])
    print("\t".join(cols))
    for r in rows:
        print("\t".join("" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c])) for c in cols))
    return EXIT_OK


def _cmd_dump(args) -> int:
    if args.n < 0:
        raise ConfigError("--n: must be nonnegative")
    single_threaded()
    try:
        state = load_state(args.snapshot)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(args.out)
    if args.n == 0:
        points = np.empty((0, state.dim))
    else:
        points = state.sample(args.n, args.seed, trailing_forward=args.trailing_forward)
    write_samples(points, out, state.dim)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcflow", description="Wasserstein gradient flows for DC potentials.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (file path or bundled name)")
    r.add_argument("config", help=f"config path or one of: {', '.join(bundled_configs())}")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--output-dir", default=None, help="output directory (overrides config and $DCFLOW_OUTPUT_ROOT)")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="compare completed runs")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", default=None, help="directory for summary.csv and comparison.csv")
    c.set_defaults(func=_cmd_compare)

    d = sub.add_parser("dump-samples", help="sample a saved flow state")
    d.add_argument("snapshot")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--trailing-forward", action="store_true", help="sample nu_{n+1} instead of mu_n")
    d.set_defaults(func=_cmd_dump)

    v = sub.add_parser("validate", help="validate a config")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        if args.command in ("compare",):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
