"""Command-line entry point.

Exit status is 0 on success, 1 when a criterion fails and 2 on a
configuration error. Reports go to ``<out>/<subcommand>/``.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..exceptions import ConfigurationError, MfgLabError
from ..mfe import MfeSolution
from . import experiments as ex
from .config import ExperimentConfig
from .io import ReportWriter

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

COMMANDS = ("validate", "solve-mfe", "simulate", "nash-gap", "girsanov-check", "spde-scaling", "converge",
            "converse", "verify-all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfglab", description="n-player mean field game laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI experiment configuration")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        p.add_argument("--out", type=Path, help="output directory (default [experiment] output)")
        p.add_argument("--workers", type=int, help="worker threads for scenario solves")
        if name in ("simulate", "nash-gap", "converge", "converse", "verify-all"):
            p.add_argument("--solution", type=Path, help="stem of a saved MfeSolution to reuse")
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        return ExperimentConfig.from_file(args.config, seed=args.seed, output=args.out, workers=args.workers)
    cfg = ExperimentConfig.default()
    if args.seed is not None or args.out is not None or args.workers is not None:
        cfg = ExperimentConfig.from_string("", seed=args.seed, output=args.out, workers=args.workers)
    return cfg


def _solution(args, config) -> Optional[MfeSolution]:
    stem = getattr(args, "solution", None)
    if stem is None:
        return None
    sol = MfeSolution.load(stem)
    if sol.model != config["model"]["name"]:
        raise ConfigurationError(f"saved solution is for {sol.model!r}, config asks for {config['model']['name']!r}")
    return sol


def dispatch(command: str, config: ExperimentConfig, writer: ReportWriter, sol=None) -> ex.RunResult:
    if command == "validate":
        return ex.run_validate(config, writer)
    if command == "solve-mfe":
        return ex.run_solve(config, writer)
    if command == "simulate":
        return ex.run_simulate(config, writer, sol)
    if command == "nash-gap":
        return ex.run_nash_gap(config, writer, sol)
    if command == "converge":
        return ex.run_forward_convergence(config, writer, sol)
    if command == "converse":
        return ex.run_converse(config, writer, sol)
    if command == "girsanov-check":
        suites = [ex.suite_martingale(config, writer), ex.suite_measure_change(config, writer)]
        return ex.RunResult(command, all(s.passed for s in suites), suites)
    if command == "spde-scaling":
        suites = [ex.suite_spde_scaling(config, writer, "fp"), ex.suite_spde_scaling(config, writer, "nu")]
        return ex.RunResult(command, all(s.passed for s in suites), suites)
    return ex.run_verification_suites(config, writer, sol=sol)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        config = load_config(args)
        sol = _solution(args, config)
        writer = ReportWriter(config.output / args.command, config.experiment_id, config.config_hash, config.seed)
        result = dispatch(args.command, config, writer, sol)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MfgLabError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for suite in result.suites:
        tag = "PASS" if suite.passed else ("INFO" if suite.informational else "FAIL")
        print(f"{tag} {suite.name}")
    print(f"{'PASS' if result.passed else 'FAIL'} {result.name} -> {writer.directory}")
    return EXIT_OK if result.passed else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
