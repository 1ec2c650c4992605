"""Command line entry point: ``bench run | validate | trace``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Optional, Sequence

from .config import ConfigError, load_config
from .runner import WORKERS_ENV, run_experiment, write_results, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Step-size sweeps for microcanonical samplers.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a config and write the result table")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default: the config's output_path)")
    run.add_argument("--workers", type=int, default=None,
                     help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    run.add_argument("--refine", action="store_true", help="add the 15-point refinement around the best decade")

    val = sub.add_parser("validate", help="check a config and print it with defaults filled")
    val.add_argument("config")

    tr = sub.add_parser("trace", help="write the per-step tuner trace")
    tr.add_argument("config")
    tr.add_argument("--out", help="output directory")
    tr.add_argument("--step-size", type=float, default=None, help="initial step (default: first grid value)")
    return p


def _output_path(cfg_path: str, out_dir: Optional[str], default: str, suffix: str = "") -> str:
    if out_dir is None:
        return default
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.basename(cfg_path)
    for ext in (".json", ".csv"):  # a sidecar is named <results>.csv.json
        stem = stem[:-len(ext)] if stem.endswith(ext) else stem
    return os.path.join(out_dir, stem + suffix + ".csv")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        import json
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK

    try:
        if args.command == "run":
            if args.refine:  # recorded in the sidecar so a rerun reproduces the table
                cfg = dataclasses.replace(cfg, refine=True)
            result = run_experiment(cfg, workers=args.workers)
            path = _output_path(args.config, args.out, cfg.output_path)
            write_results([result], path)
            best = result.best
            if best is None:
                print(f"{path}: no grid point succeeded", file=sys.stderr)
                return EXIT_RUNTIME
            print(f"{path}: selected step_size={best.step_size!r} {cfg.resolved_metric}={best.metric_value!r}")
        else:
            path = _output_path(args.config, args.out, os.path.splitext(cfg.output_path)[0] + "_trace.csv",
                                "_trace")
            write_trace(cfg, path, args.step_size)
            print(path)
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
