"""Tests for runner.py."""

from __future__ import annotations

import json
import sys
import tomllib
from pathlib import Path
from typing import Any
from unittest.mock import patch

import pytest

from ccmc_lab.config import THREADS_ENV, ExperimentKind
from ccmc_lab.runner import (
    EXIT_CONFIG_ERROR,
    EXIT_FAILURE,
    EXIT_OK,
    SUMMARY_FILE,
    build_parser,
    cli_run,
    parse_and_dispatch,
)

POSITIONAL_SMOKE = ["positional", "--set", "positional.n_trials=4", "--quiet"]


@pytest.fixture(autouse=True)
def _no_threads_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(THREADS_ENV, raising=False)


def _summary(out: Path) -> dict[str, Any]:
    data: dict[str, Any] = json.loads((out / SUMMARY_FILE).read_text(encoding="utf-8"))
    return data


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class TestBuildParser:
    """Tests for the argument parser."""

    def test_defaults(self) -> None:
        """Test flag defaults."""
        args = build_parser().parse_args(["collapse"])
        assert args.subcommand == "collapse"
        assert args.config is None
        assert args.out == Path("results")
        assert args.seed is None
        assert args.overrides == []
        assert args.threads is None
        assert not args.timings
        assert not args.no_plots

    def test_all_flags(self) -> None:
        """Test that every flag parses."""
        args = build_parser().parse_args(
            [
                "all",
                "--config",
                "exp.json",
                "--out",
                "o",
                "--seed",
                "7",
                "--set",
                "K=3",
                "--set",
                "collapse.T=100",
                "--threads",
                "2",
                "--timings",
                "--no-plots",
                "--verbose",
            ]
        )
        assert args.config == Path("exp.json")
        assert args.seed == 7
        assert args.overrides == ["K=3", "collapse.T=100"]
        assert args.threads == 2
        assert args.timings and args.no_plots and args.verbose

    def test_subcommands(self) -> None:
        """Test that every experiment kind and 'all' are accepted."""
        parser = build_parser()
        for name in [k.value for k in ExperimentKind] + ["all"]:
            assert parser.parse_args([name]).subcommand == name

    def test_unknown_subcommand_exits_2(self) -> None:
        """Test that argparse rejects an unknown subcommand."""
        with pytest.raises(SystemExit) as exc_info:
            build_parser().parse_args(["bogus"])
        assert exc_info.value.code == 2

    def test_verbose_and_quiet_are_exclusive(self) -> None:
        """Test the mutually exclusive verbosity flags."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["all", "--verbose", "--quiet"])


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


class TestParseAndDispatch:
    """Tests for parse_and_dispatch."""

    def test_positional_run_writes_artifacts(self, tmp_path: Path) -> None:
        """Test a passing run, its CSV and its summary."""
        out = tmp_path / "out"
        assert parse_and_dispatch([*POSITIONAL_SMOKE, "--out", str(out)]) == EXIT_OK
        assert (out / "positional_positional.csv").exists()
        summary = _summary(out)
        assert summary["passed"] is True
        assert summary["cli"]["subcommand"] == "positional"
        assert summary["config"]["positional"]["n_trials"] == 4
        assert list(summary["experiments"]) == ["positional"]
        assert "wall_time_s" not in summary["experiments"]["positional"]

    def test_timings_are_opt_in(self, tmp_path: Path) -> None:
        """Test that --timings adds wall-clock times."""
        code = parse_and_dispatch(
            [*POSITIONAL_SMOKE, "--out", str(tmp_path), "--timings"]
        )
        assert code == EXIT_OK
        assert _summary(tmp_path)["experiments"]["positional"]["wall_time_s"] >= 0.0

    def test_thread_count_does_not_change_results(self, tmp_path: Path) -> None:
        """Test that summaries agree across thread counts."""
        one, two = tmp_path / "one", tmp_path / "two"
        parse_and_dispatch([*POSITIONAL_SMOKE, "--out", str(one), "--threads", "1"])
        parse_and_dispatch([*POSITIONAL_SMOKE, "--out", str(two), "--threads", "2"])
        assert _summary(one)["experiments"] == _summary(two)["experiments"]
        assert _summary(one)["spec_hash"] == _summary(two)["spec_hash"]
        csv = "positional_positional.csv"
        assert (one / csv).read_bytes() == (two / csv).read_bytes()

    def test_tolerance_failure_exits_1(self, tmp_path: Path) -> None:
        """Test that a failed check gives exit code 1 and still writes the summary."""
        code = parse_and_dispatch(
            [
                *POSITIONAL_SMOKE,
                "--out",
                str(tmp_path),
                "--set",
                "positional.tol=1e-300",
            ]
        )
        assert code == EXIT_FAILURE
        assert _summary(tmp_path)["passed"] is False

    def test_unknown_override_exits_2(self, tmp_path: Path) -> None:
        """Test that an unknown key is a configuration error."""
        code = parse_and_dispatch(
            ["positional", "--out", str(tmp_path), "--set", "positional.nope=1"]
        )
        assert code == EXIT_CONFIG_ERROR
        assert not (tmp_path / SUMMARY_FILE).exists()

    def test_invalid_config_exits_2(self, tmp_path: Path) -> None:
        """Test that a config failing validation is rejected before running."""
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"consistency": {"K": 2}}))
        code = parse_and_dispatch(
            ["positional", "--config", str(config), "--out", str(tmp_path)]
        )
        assert code == EXIT_CONFIG_ERROR

    def test_missing_or_malformed_config_exits_2(self, tmp_path: Path) -> None:
        """Test I/O and JSON errors on the config file."""
        missing = tmp_path / "missing.json"
        code = parse_and_dispatch(["positional", "--config", str(missing)])
        assert code == EXIT_CONFIG_ERROR
        broken = tmp_path / "broken.json"
        broken.write_text("{")
        code = parse_and_dispatch(["positional", "--config", str(broken)])
        assert code == EXIT_CONFIG_ERROR

    def test_nonpositive_threads_exits_2(self, tmp_path: Path) -> None:
        """Test that --threads 0 fails validation."""
        code = parse_and_dispatch(
            ["positional", "--out", str(tmp_path), "--threads", "0"]
        )
        assert code == EXIT_CONFIG_ERROR

    def test_bare_k_override_is_recorded(self, tmp_path: Path) -> None:
        """Test that --set K=3 runs and lands in the summary."""
        code = parse_and_dispatch(
            [*POSITIONAL_SMOKE, "--out", str(tmp_path), "--set", "K=3"]
        )
        assert code == EXIT_OK
        summary = _summary(tmp_path)
        assert summary["cli"]["set"] == ["positional.n_trials=4", "K=3"]
        for section in ("consistency", "complexity", "positional"):
            assert summary["config"][section]["K"] == 3

    @pytest.mark.parametrize(
        "flags",
        [
            ["--seed", "-1"],
            ["--seed", str(2**64)],
            ["--set", 'master_seed="x"'],
            ["--set", "collapse.ensemble=2.5"],
        ],
    )
    def test_bad_seed_or_count_exits_2(
        self, tmp_path: Path, flags: list[str]
    ) -> None:
        """Test that invalid seeds and fractional counts are configuration errors."""
        code = parse_and_dispatch([*POSITIONAL_SMOKE, "--out", str(tmp_path), *flags])
        assert code == EXIT_CONFIG_ERROR
        assert not (tmp_path / SUMMARY_FILE).exists()

    def test_repeated_invocation_is_byte_identical(self, tmp_path: Path) -> None:
        """Test that the same command twice rewrites identical CSV and JSON."""
        argv = [*POSITIONAL_SMOKE, "--out", str(tmp_path), "--seed", "11"]
        assert parse_and_dispatch(argv) == EXIT_OK
        first = {p.name: p.read_bytes() for p in sorted(tmp_path.iterdir())}
        assert parse_and_dispatch(argv) == EXIT_OK
        second = {p.name: p.read_bytes() for p in sorted(tmp_path.iterdir())}
        assert {SUMMARY_FILE, "positional_positional.csv"} <= set(first)
        assert first == second


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


class TestCliRun:
    """Tests for the console entry point."""

    def test_console_entry_is_declared(self) -> None:
        """Test that pyproject wires ccmc-lab to cli_run."""
        pyproject_path = Path(__file__).resolve().parents[1] / "pyproject.toml"
        pyproject = tomllib.loads(pyproject_path.read_text(encoding="utf-8"))
        assert pyproject["project"]["scripts"]["ccmc-lab"] == "ccmc_lab.runner:cli_run"

    def test_cli_run_exits_with_dispatch_code(self, tmp_path: Path) -> None:
        """Test that cli_run passes the exit code to sys.exit."""
        argv = ["ccmc-lab", *POSITIONAL_SMOKE, "--out", str(tmp_path), "--no-plots"]
        with patch.object(sys, "argv", argv), pytest.raises(SystemExit) as exc_info:
            cli_run()
        assert exc_info.value.code == EXIT_OK
