"""Command line entry point.

    stochstokes mesh-info --L 1 --n 16
    stochstokes converge-time --config study.ini --samples 50 --out results/

Studies write ``<command>.csv`` or ``<command>.json`` into ``--out`` (or to
standard output) and print one line per acceptance band to standard error.
Exit status is 0 on success, 2 for configuration errors and 3 when an
experiment fails or a band is violated.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentFailure,
    compare_noise,
    converge_space,
    converge_time,
    estimate_errors,
    evaluate_bands,
    summary_json,
)
from .mesh import build_torus_mesh

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3

STUDIES = {
    "run": estimate_errors,
    "converge-time": converge_time,
    "converge-space": converge_space,
    "compare-noise": compare_noise,
}


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with status 2 on usage errors, the same code as a bad config
    parser = argparse.ArgumentParser(prog="stochstokes", description="Stochastic Stokes discretizations and convergence studies.")
    sub = parser.add_subparsers(dest="command", required=True)

    mesh = sub.add_parser("mesh-info", help="print mesh size and DOF counts as JSON")
    mesh.add_argument("--L", type=float, default=1.0)
    mesh.add_argument("--n", type=int, required=True)

    for name in STUDIES:
        p = sub.add_parser(name, help=f"{name} study from a config file")
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--samples", type=int, default=None, help="override the config sample count")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    over = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        over["seed"] = args.seed
    if args.samples is not None:
        over["samples"] = args.samples
    return cfg.replace(**over) if over else cfg


def _emit(text: str, args) -> None:
    if args.out is None:
        sys.stdout.write(text)
        return
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"{args.command}.{args.format}").write_text(text, encoding="utf-8")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "mesh-info":
        try:
            mesh = build_torus_mesh(args.L, args.n)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(mesh.to_dict(), indent=2))
        return EXIT_OK

    try:
        cfg = _load(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rep = STUDIES[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentFailure as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    _emit(rep.to_csv() if args.format == "csv" else summary_json(rep) + "\n", args)
    status = EXIT_OK
    for name, ok, detail in evaluate_bands(rep, args.command):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=sys.stderr)
        if not ok:
            status = EXIT_FAILURE
    return status


if __name__ == "__main__":
    sys.exit(main())
