"""Command line entry point: ``rangeint run <config>`` and ``rangeint report <dir>``."""
from __future__ import annotations

import argparse
import sys

from . import experiment as ex


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rangeint",
                                description="Intersection-of-ranges experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute an experiment config")
    r.add_argument("config")
    r.add_argument("--force", action="store_true", help="recompute completed units")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--seed", type=_u64, default=None, help="override seed_root")
    rep = sub.add_parser("report", help="write CSV and JSON tables from records")
    rep.add_argument("directory")
    rep.add_argument("--kind", required=True, choices=ex.KINDS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        try:
            cfg = ex.ExperimentConfig.load(args.config, seed_override=args.seed)
        except ex.ConfigError as exc:
            for msg in exc.errors:
                print(f"config error: {msg}", file=sys.stderr)
            return ex.EXIT_VALIDATION
        if args.workers is not None and args.workers < 1:
            print("config error: workers: must be >= 1", file=sys.stderr)
            return ex.EXIT_VALIDATION
        summary = ex.run(cfg, force=args.force, workers=args.workers)
        print(summary.text())
        return summary.exit_code
    try:
        csv_path, json_path = ex.report(args.directory, args.kind)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ex.EXIT_VALIDATION
    print(f"wrote {csv_path}\nwrote {json_path}")
    return ex.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
