"""Command-line entry point: ``deepfbsde <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .experiments import PRESETS, ConfigError, emit_plots, load_config_file, resolve_config, run_experiment

log = logging.getLogger("deepfbsde")


def _parser():
    ap = argparse.ArgumentParser(prog="deepfbsde", description="Deep BSDE solver experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("solve", "converge", "audit", "oracle", "crosscheck"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="TOML config (or a JSON manifest to rerun)")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--out", type=Path, default=None, help="output directory (default results/<command>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true", help="byte-reproducible CSVs, single BLAS thread")
        sp.add_argument("--max-seconds", type=int, help="wall-time budget per training run")
        sp.add_argument("-v", "--verbose", action="store_true")
    pp = sub.add_parser("plot", help="SVG charts from training / convergence CSVs")
    pp.add_argument("csv", nargs="*", type=Path, help="training CSVs, one per run")
    pp.add_argument("--convergence", type=Path)
    pp.add_argument("--out", type=Path, default=Path("plots"))
    return ap


def _overrides(args):
    over = {"mode": args.command}
    train = {}
    if args.seed is not None:
        train["seed"] = args.seed
    if args.deterministic:
        train["deterministic"] = True
    if args.max_seconds is not None:
        train["max_seconds"] = args.max_seconds
    if train:
        over["train"] = train
    if args.out is not None:
        over["out"] = str(args.out)
    return over


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "plot":
        if not args.csv and args.convergence is None:
            print("error: nothing to plot", file=sys.stderr)
            return 2
        try:
            for f in emit_plots(args.csv, args.out, args.convergence):
                print(args.out / f)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    try:
        raw = load_config_file(args.config) if args.config else None
        cfg = resolve_config(raw, args.preset, _overrides(args))
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out"] or Path("results") / args.command)

    if cfg["train"]["deterministic"]:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1)
    else:
        limiter = nullcontext()
    with limiter:
        result = run_experiment(cfg, out)
    print(json.dumps(result.summary, indent=2, sort_keys=True, default=str))
    print(f"artifacts in {out}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
