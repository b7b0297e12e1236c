"""CLI runner: parse flags, dispatch experiment drivers and write artifacts."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import __version__
from .config import THREADS_ENV, ExperimentKind, ExperimentSpec, LabConfig
from .core import CcmcLabError
from .executor import TrialExecutor
from .experiments import DRIVERS
from .results import ExperimentResult, write_experiment, write_json_atomic

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2

SUMMARY_FILE = "summary.json"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser; argparse itself exits with 2 on bad flags."""
    parser = argparse.ArgumentParser(
        prog="ccmc-lab",
        description="Attention/CCMC equivalence, consistency, sample-complexity "
        "and collapse experiments.",
    )
    parser.add_argument(
        "subcommand",
        choices=[k.value for k in ExperimentKind] + ["all"],
        help="experiment to run ('all' runs every experiment in order)",
    )
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help="JSON experiment file (default: built-in acceptance defaults)",
    )
    parser.add_argument(
        "--out",
        type=Path,
        default=Path("results"),
        help="output directory for CSV, JSON and SVG artifacts (default: results)",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="master seed (default: master_seed from the config, 0)",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field; dotted keys, JSON values (repeatable)",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads for independent trials (default: ${THREADS_ENV} "
        "or CPU count + 4, capped at 32)",
    )
    parser.add_argument(
        "--timings",
        action="store_true",
        help="record wall-clock times in summary.json (outputs then differ per run)",
    )
    parser.add_argument(
        "--no-plots",
        action="store_true",
        help="skip SVG plots",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings only")
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _cli_metadata(args: argparse.Namespace) -> dict[str, Any]:
    """Every flag as given, so summary.json records the exact invocation."""
    return {
        "subcommand": args.subcommand,
        "config": None if args.config is None else str(args.config),
        "out": str(args.out),
        "seed": args.seed,
        "set": list(args.overrides),
        "threads": args.threads,
        "timings": args.timings,
        "no_plots": args.no_plots,
        "verbose": args.verbose,
        "quiet": args.quiet,
    }


def load_config(args: argparse.Namespace) -> LabConfig:
    """Resolve the configuration from the file, environment, overrides and flags.

    Raises:
        ConfigurationError: If the result does not validate.
    """
    config = LabConfig.load(args.config, overrides=args.overrides)
    if args.seed is not None:
        config.master_seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    spec = ExperimentSpec(ExperimentKind.EQUIVALENCE, config)
    spec.require_valid()
    return config


def run_experiments(
    kinds: Sequence[ExperimentKind],
    config: LabConfig,
    out_dir: Path,
    plots: bool = True,
    timings: bool = False,
) -> tuple[dict[str, Any], bool]:
    """Run each experiment, write its artifacts and collect its summary.

    Returns:
        Tuple of (per-experiment summaries, whether every check passed).
    """
    executor = TrialExecutor(config.threads)
    summaries: dict[str, Any] = {}
    passed = True
    for kind in kinds:
        spec = ExperimentSpec(kind, config, out_dir)
        started = time.perf_counter()
        result: ExperimentResult = DRIVERS[kind](spec, executor)
        elapsed = time.perf_counter() - started
        logger.info("%s took %.1f s", kind.value, elapsed)
        write_experiment(result, out_dir, plots=plots)
        entry = result.summary()
        if timings:
            entry["wall_time_s"] = elapsed
        summaries[kind.value] = entry
        if not result.passed:
            failed = [c.name for c in result.checks if not c.passed]
            logger.warning(
                "%s failed checks: %s", kind.value, ", ".join(failed) or "rows"
            )
        passed &= result.passed
    return summaries, passed


def parse_and_dispatch(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return its exit code.

    Returns:
        0 if every check passed, 1 on a tolerance failure, 2 on a
        configuration or I/O error.
    """
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        config = load_config(args)
        out_dir: Path = args.out
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.subcommand == "all":
            kinds = list(ExperimentKind)
        else:
            kinds = [ExperimentKind(args.subcommand)]
        experiments, passed = run_experiments(
            kinds, config, out_dir, plots=not args.no_plots, timings=args.timings
        )
        summary = {
            "version": 1,
            "passed": passed,
            "cli": _cli_metadata(args),
            "config": config.to_json(),
            "spec_hash": config.spec_hash(),
            "experiments": experiments,
        }
        write_json_atomic(out_dir / SUMMARY_FILE, summary)
    except (CcmcLabError, OSError, json.JSONDecodeError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG_ERROR
    logger.info(
        "Summary written to %s: %s",
        out_dir / SUMMARY_FILE,
        "pass" if passed else "FAIL",
    )
    return EXIT_OK if passed else EXIT_FAILURE


def cli_run() -> None:
    """CLI entry point for ccmc-lab."""
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    cli_run()
