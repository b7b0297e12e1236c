"""Result tables, pass/fail checks and artifact writers.

Everything written here is a pure function of its inputs: floats are
serialized with ``repr``, JSON keys are sorted, and SVG plots use a fixed
hash salt without a date stamp.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_TOLERANCE = "tolerance_exceeded"
STATUS_CENSORED = "censored"
STATUS_OPTIMIZER = "optimizer_error"
STATUS_REPORT = "report_only"

SVG_HASH_SALT = "ccmc-lab"


def _plain(value: Any) -> Any:
    """Convert numpy scalars and arrays to JSON-native values."""
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, float | np.floating):
        # JSON has no NaN or infinity
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(v) for v in value]
    return value


def _cell(value: Any) -> str:
    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"
    if isinstance(value, float | np.floating):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


@dataclass
class ResultTable:
    """Rows of named columns plus metadata (spec hash, seed)."""

    name: str
    columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def add_row(self, **values: Any) -> None:
        """Append a row; it must provide exactly the table's columns."""
        if set(values) != set(self.columns):
            missing = sorted(set(self.columns) - set(values))
            extra = sorted(set(values) - set(self.columns))
            raise ValueError(
                f"Row for table '{self.name}' has missing {missing} "
                f"/ extra {extra} columns"
            )
        self.rows.append(values)

    def column(self, name: str) -> list[Any]:
        return [row[name] for row in self.rows]

    @property
    def failures(self) -> list[dict[str, Any]]:
        """Rows whose status marks a failure."""
        if "status" not in self.columns:
            return []
        return [row for row in self.rows if row["status"] == STATUS_TOLERANCE]

    def to_csv(self, path: Path) -> None:
        """Write with a header row, comma separators and LF newlines."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_cell(row[c]) for c in self.columns])


@dataclass(frozen=True)
class CheckResult:
    """An acceptance check: ``value`` compared against ``threshold``."""

    name: str
    passed: bool
    value: float | None = None
    threshold: float | str | None = None
    detail: str = ""

    @property
    def status(self) -> str:
        return STATUS_OK if self.passed else STATUS_TOLERANCE

    def to_json(self) -> dict[str, Any]:
        return _plain(
            {
                "name": self.name,
                "status": self.status,
                "value": self.value,
                "threshold": self.threshold,
                "detail": self.detail,
            }
        )


@dataclass(frozen=True)
class PlotSeries:
    label: str
    x: Sequence[float]
    y: Sequence[float]


@dataclass
class PlotSpec:
    """A line plot written as ``<name>.svg``."""

    name: str
    title: str
    xlabel: str
    ylabel: str
    series: list[PlotSeries] = field(default_factory=list)
    xscale: str = "linear"
    yscale: str = "linear"


@dataclass
class ExperimentResult:
    """Tables, checks and plots produced by one experiment driver."""

    kind: str
    tables: list[ResultTable] = field(default_factory=list)
    checks: list[CheckResult] = field(default_factory=list)
    plots: list[PlotSpec] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and not any(
            t.failures for t in self.tables
        )

    def table(self, name: str) -> ResultTable:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> dict[str, Any]:
        return _plain(
            {
                "passed": self.passed,
                "metadata": self.metadata,
                "checks": [c.to_json() for c in self.checks],
                "tables": {
                    t.name: {"rows": len(t.rows), "failures": len(t.failures)}
                    for t in self.tables
                },
            }
        )


def write_json_atomic(path: Path, data: dict[str, Any]) -> None:
    """Write sorted-key JSON through a temporary file and an atomic rename.

    Raises:
        OSError: If the directory is not writable.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path_str = tempfile.mkstemp(
        suffix=".tmp", prefix=".summary-", dir=path.parent
    )
    tmp_path = Path(tmp_path_str)
    replaced = False
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            json.dump(_plain(data), f, indent=2, sort_keys=True)
            f.write("\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
        replaced = True
    finally:
        if not replaced:
            tmp_path.unlink(missing_ok=True)


def save_plot(plot: PlotSpec, out_dir: Path) -> Path:
    """Render ``plot`` to ``out_dir/<name>.svg`` deterministically."""
    path = out_dir / f"{plot.name}.svg"
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        try:
            for s in plot.series:
                ax.plot(list(s.x), list(s.y), marker="o", markersize=3, label=s.label)
            ax.set_xscale(plot.xscale)
            ax.set_yscale(plot.yscale)
            ax.set_title(plot.title)
            ax.set_xlabel(plot.xlabel)
            ax.set_ylabel(plot.ylabel)
            if len(plot.series) > 1:
                ax.legend()
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    logger.debug("Wrote plot %s", path)
    return path


def write_experiment(
    result: ExperimentResult, out_dir: Path, plots: bool = True
) -> list[Path]:
    """Write every table as ``<kind>_<table>.csv`` and, optionally, every plot.

    Returns:
        Paths written, in a fixed order.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for t in result.tables:
        path = out_dir / f"{result.kind}_{t.name}.csv"
        t.to_csv(path)
        written.append(path)
    if plots:
        written.extend(save_plot(p, out_dir) for p in result.plots)
    logger.debug("Wrote %d artifacts for %s", len(written), result.kind)
    return written
