"""``looplens`` command line: synth, detect, analyze, run.

Exit codes: 0 success, 1 internal error, 2 input or usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, load_config
from .reports import StageError, cmd_analyze, cmd_detect, cmd_run
from .synthlab import SynthError, SynthScenario, write_scenario

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
THREADS_ENV = "LOOPLENS_THREADS"


class UsageError(Exception):
    pass


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _grid_dims(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("street grid dimensions must be positive")
    return r, c


def _pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", type=Path, help="JSON run configuration")
    p.add_argument("--events", type=Path)
    p.add_argument("--stations", type=Path)
    p.add_argument("--streets", type=Path)
    p.add_argument("-o", "--output-dir", type=Path)
    p.add_argument("--cell-size", type=float)
    p.add_argument("--window-days", type=_positive_int)
    p.add_argument("--s-sched", type=float)
    p.add_argument("--s-stay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=_positive_int, help=f"worker threads (default: ${THREADS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="looplens", description="Self-loop detection and spatial/causal analysis for dockless bike trips")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic city with ground truth")
    s.add_argument("-o", "--out", type=Path, required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-bikes", type=_positive_int, default=100)
    s.add_argument("--days", type=_positive_int, default=2)
    s.add_argument("--extent", type=float, default=8000.0, help="city side length in metres")
    s.add_argument("--stations", type=int, default=60)
    s.add_argument("--street-grid", type=_grid_dims, default=(8, 8), help="ROWSxCOLS")
    s.add_argument("--loop-propensity", type=_probability, default=0.3)
    s.add_argument("--reposition-rate", type=_probability, default=0.02)
    s.add_argument("--trips-per-day", type=float, default=6.0)
    s.add_argument("--cell-size", type=float, default=500.0)

    for name, text in (
        ("detect", "events -> loop events and intensity tables"),
        ("analyze", "intensity + covariates -> Moran, VIF, SAR, DML, CATE reports"),
        ("run", "detect followed by analyze"),
    ):
        _pipeline_args(sub.add_parser(name, help=text))
    return parser


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env is None or env == "":
        return 1
    try:
        v = int(env)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
    if v < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
    return v


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        events=args.events,
        stations=args.stations,
        streets=args.streets,
        output_dir=args.output_dir,
        cell_size=args.cell_size,
        window_days=args.window_days,
        s_sched=args.s_sched,
        s_stay=args.s_stay,
        seed=args.seed,
    )


def _synth(args) -> int:
    try:
        sc = SynthScenario(
            seed=args.seed,
            n_bikes=args.n_bikes,
            days=args.days,
            extent_m=args.extent,
            n_stations=args.stations,
            street_grid=args.street_grid,
            loop_propensity=args.loop_propensity,
            reposition_rate=args.reposition_rate,
            trips_per_day=args.trips_per_day,
            cell_size=args.cell_size,
        )
    except SynthError as exc:
        raise UsageError(str(exc)) from None
    for key, path in write_scenario(sc, args.out).items():
        print(f"{key}\t{path}")
    return EXIT_OK


def _dispatch(args) -> int:
    if args.command == "synth":
        return _synth(args)
    threads = resolve_threads(args.threads)
    cfg = _config(args)
    if args.command == "detect":
        res = cmd_detect(cfg, threads)
        print(json.dumps({"loops": res.manifest["loops"]["total"], "output_dir": str(cfg.output_dir)}))
    elif args.command == "analyze":
        paths = cmd_analyze(cfg, threads)
        print(json.dumps({"summary": str(paths["summary"])}))
    else:
        paths = cmd_run(cfg, threads)
        print(json.dumps({"summary": str(paths["summary"]), "output_dir": str(cfg.output_dir)}))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INPUT
    try:
        return _dispatch(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"looplens: usage error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (StageError, ConfigError) as exc:
        print(f"looplens: error {exc}" if isinstance(exc, StageError) else f"looplens: error [config] {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        print("looplens: internal error", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
