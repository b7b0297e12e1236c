"""Experiment configuration for ccmc-lab."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

from .attention import ConfigurationError
from .learn import OptimizerSettings

logger = logging.getLogger(__name__)

THREADS_ENV = "CCMC_LAB_THREADS"
MAX_SEED = 2**64 - 1


class ExperimentKind(StrEnum):
    EQUIVALENCE = "equivalence"
    CONSISTENCY = "consistency"
    COMPLEXITY = "complexity"
    COLLAPSE = "collapse"
    POSITIONAL = "positional"


@dataclass
class OptimizerConfig:
    """Gradient-descent settings shared by the learning experiments."""

    step_size: float = 0.1
    max_iters: int = 200_000
    grad_tol: float = 1e-9
    record_every: int = 100
    max_halvings: int = 5

    def settings(self) -> OptimizerSettings:
        return OptimizerSettings(
            step_size=self.step_size,
            max_iters=self.max_iters,
            grad_tol=self.grad_tol,
            record_every=self.record_every,
            max_halvings=self.max_halvings,
        )


@dataclass
class EquivalenceConfig:
    """Attention/CCMC agreement, bijection round trip and null-space batteries."""

    K_grid: list[int] = field(default_factory=lambda: [2, 3, 5, 8])
    n_weights: int = 100
    n_prompts: int = 50
    max_prompt_length: int = 12
    weight_scale: float = 1.0
    roundtrip_K_grid: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8])
    n_roundtrip: int = 50
    n_nullspace: int = 500
    extra_dims: int = 2
    tol: float = 1e-10
    roundtrip_weight_tol: float = 1e-8
    nullspace_tol: float = 1e-12


@dataclass
class ConsistencyConfig:
    """Population-MLE recovery on connected and disconnected supports."""

    K: int = 4
    n_ground_truths: int = 3
    gt_scale: float = 1.0
    iid_prompts: int = 12
    iid_length: int = 3
    tv_tol: float = 1e-4
    disconnected_tv_min: float = 1e-2
    ratio_spread_tol: float = 1e-3
    n_convexity_probes: int = 10_000
    n_gradient_checks: int = 100
    n_kl_checks: int = 100
    gradient_rel_tol: float = 1e-5
    kl_tol: float = 1e-12
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(step_size=1.0, grad_tol=1e-10)
    )


@dataclass
class ComplexityConfig:
    """Empirical-MLE excess loss versus sample size."""

    K: int = 5
    n_grid: list[int] = field(default_factory=lambda: [2**e for e in range(7, 14)])
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    gt_scale: float = 0.5
    slope_min: float = -1.35
    slope_max: float = -0.65
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(
            step_size=1.0, max_iters=20_000, grad_tol=1e-8
        )
    )


@dataclass
class CollapseConfig:
    """Single-trajectory collapse, weak-transition growth and visit checks."""

    p_grid: list[float] = field(default_factory=lambda: [0.25, 0.30, 0.40, 0.50])
    ensemble: int = 200
    T: int = 100_000
    t0_fraction: float = 0.1
    exponent_tol: float = 0.15
    symmetric_tol: float = 0.05
    decades: list[int] = field(default_factory=lambda: [1_000, 10_000, 100_000])
    visit_K: int = 3
    visit_T: int = 1_000_000
    visit_window: int = 100_000
    visit_seeds: list[int] = field(default_factory=lambda: list(range(20)))
    demo_K: int = 6
    demo_T: int = 500
    demo_gt_scale: float = 1.0
    start_prompt: list[int] | None = None
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(
            step_size=1.0, max_iters=20_000, grad_tol=1e-8
        )
    )


@dataclass
class PositionalConfig:
    """Positional CCMC against attention with absolute positions."""

    K: int = 3
    L: int = 4
    n_trials: int = 200
    weight_scale: float = 1.0
    tol: float = 1e-10


SECTIONS: dict[ExperimentKind, str] = {
    ExperimentKind.EQUIVALENCE: "equivalence",
    ExperimentKind.CONSISTENCY: "consistency",
    ExperimentKind.COMPLEXITY: "complexity",
    ExperimentKind.COLLAPSE: "collapse",
    ExperimentKind.POSITIONAL: "positional",
}


def _parse_value(raw: str) -> Any:
    """JSON-decode an override value, falling back to the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _assign(target: Any, data: dict[str, Any], where: str) -> None:
    names = {f.name: f for f in dataclasses.fields(target)}
    for key, value in data.items():
        if key not in names:
            raise ConfigurationError(f"Unknown configuration key '{where}{key}'")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current) and not isinstance(current, type):
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{where}{key}' must be an object")
            _assign(current, value, f"{where}{key}.")
        else:
            setattr(target, key, value)


@dataclass
class LabConfig:
    """Main configuration for every experiment driver."""

    master_seed: int = 0
    threads: int | None = None
    equivalence: EquivalenceConfig = field(default_factory=EquivalenceConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    complexity: ComplexityConfig = field(default_factory=ComplexityConfig)
    collapse: CollapseConfig = field(default_factory=CollapseConfig)
    positional: PositionalConfig = field(default_factory=PositionalConfig)

    @classmethod
    def load(
        cls, config_path: Path | None = None, overrides: list[str] | None = None
    ) -> LabConfig:
        """Load configuration from defaults, a JSON file, the environment and overrides.

        Priority order (highest last):
        1. Dataclass defaults
        2. JSON experiment file
        3. CCMC_LAB_THREADS environment variable
        4. ``KEY=VALUE`` overrides

        Args:
            config_path: Optional path to a JSON experiment file.
            overrides: ``KEY=VALUE`` strings; see apply_override.

        Returns:
            Loaded configuration.

        Raises:
            ConfigurationError: On unknown keys or malformed overrides.
            OSError: If the file cannot be read.
            json.JSONDecodeError: If the file is not valid JSON.
        """
        logger.debug("Loading configuration")
        config = cls()
        if config_path is not None:
            with open(config_path, encoding="utf-8") as f:
                data = json.load(f)
            if not isinstance(data, dict):
                raise ConfigurationError(f"{config_path} must hold a JSON object")
            _assign(config, data, "")
            logger.debug("Configuration read from %s", config_path)

        threads = os.environ.get(THREADS_ENV)
        if threads:
            try:
                config.threads = int(threads)
            except ValueError:
                logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, threads)

        for override in overrides or []:
            config.apply_override(override)

        logger.debug(
            "Configuration loaded: master_seed=%s, threads=%s",
            config.master_seed,
            config.threads,
        )
        return config

    def apply_override(self, override: str) -> None:
        """Apply one ``KEY=VALUE`` override.

        Dotted keys address a nested field (``complexity.n_grid=[128,256]``).
        A bare key that is not a top-level field applies to every experiment
        section holding a field of that name (``K=3``).

        Raises:
            ConfigurationError: If the override is malformed or names no field.
        """
        key, sep, raw = override.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(
                f"Override must look like KEY=VALUE, got {override!r}"
            )
        value = _parse_value(raw)
        path = key.split(".")
        top_level = {f.name for f in dataclasses.fields(self)}
        if len(path) == 1 and path[0] not in top_level:
            sections = [
                getattr(self, name)
                for name in SECTIONS.values()
                if path[0] in {f.name for f in dataclasses.fields(getattr(self, name))}
            ]
            if not sections:
                raise ConfigurationError(f"Unknown configuration key '{key}'")
            for section in sections:
                setattr(section, path[0], value)
            return
        nested: dict[str, Any] = {path[-1]: value}
        for part in reversed(path[:-1]):
            nested = {part: nested}
        _assign(self, nested, "")

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def spec_hash(self, kind: ExperimentKind | None = None) -> str:
        """SHA-256 of the canonical JSON of the section(s), truncated to 16 hex chars.

        The master seed is included; the thread count is not, since it never
        changes results.
        """
        data = self.to_json()
        data.pop("threads")
        if kind is not None:
            section = SECTIONS[kind]
            data = {"master_seed": data["master_seed"], section: data[section]}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def validate(self) -> list[str]:
        """Validate the configuration.

        Returns:
            List of validation error messages. Empty if valid.
        """
        errors: list[str] = []

        if (
            isinstance(self.master_seed, bool)
            or not isinstance(self.master_seed, int)
            or not 0 <= self.master_seed <= MAX_SEED
        ):
            errors.append("master_seed must be an integer in [0, 2**64).")

        if self.threads is not None and (
            not isinstance(self.threads, int) or self.threads < 1
        ):
            errors.append("threads must be a positive integer.")

        def positive(name: str, value: Any) -> None:
            number = not isinstance(value, bool) and isinstance(value, int | float)
            if not number or value <= 0:
                errors.append(f"{name} must be a positive number.")

        def count(name: str, value: Any, minimum: int = 1) -> None:
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                errors.append(f"{name} must be an integer >= {minimum}.")

        def grid(name: str, values: Any, minimum: int = 1) -> None:
            if not isinstance(values, list) or not values:
                errors.append(f"{name} must be a non-empty list.")
                return
            for v in values:
                if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
                    errors.append(f"{name} entries must be integers >= {minimum}.")
                    return

        def optimizer(name: str, opt: OptimizerConfig) -> None:
            for attr in ("step_size", "grad_tol"):
                positive(f"{name}.optimizer.{attr}", getattr(opt, attr))
            for attr in ("max_iters", "record_every"):
                count(f"{name}.optimizer.{attr}", getattr(opt, attr))
            count(f"{name}.optimizer.max_halvings", opt.max_halvings, minimum=0)

        eq = self.equivalence
        grid("equivalence.K_grid", eq.K_grid)
        grid("equivalence.roundtrip_K_grid", eq.roundtrip_K_grid)
        for attr in ("n_weights", "n_prompts", "n_roundtrip", "n_nullspace"):
            count(f"equivalence.{attr}", getattr(eq, attr))
        for attr in ("tol", "roundtrip_weight_tol", "nullspace_tol"):
            positive(f"equivalence.{attr}", getattr(eq, attr))
        count("equivalence.max_prompt_length", eq.max_prompt_length, minimum=2)
        count("equivalence.extra_dims", eq.extra_dims, minimum=0)

        cons = self.consistency
        # the split support needs a pair of keys in at least one half
        count("consistency.K", cons.K, minimum=3)
        for attr in (
            "n_ground_truths",
            "iid_prompts",
            "iid_length",
            "n_convexity_probes",
            "n_gradient_checks",
            "n_kl_checks",
        ):
            count(f"consistency.{attr}", getattr(cons, attr))
        for attr in ("gt_scale", "tv_tol", "gradient_rel_tol", "kl_tol"):
            positive(f"consistency.{attr}", getattr(cons, attr))
        optimizer("consistency", cons.optimizer)

        comp = self.complexity
        count("complexity.K", comp.K, minimum=2)
        positive("complexity.gt_scale", comp.gt_scale)
        grid("complexity.n_grid", comp.n_grid)
        grid("complexity.seeds", comp.seeds, minimum=0)
        if isinstance(comp.n_grid, list) and len(set(comp.n_grid)) != len(comp.n_grid):
            errors.append("complexity.n_grid entries must be distinct.")
        if isinstance(comp.seeds, list) and len(set(comp.seeds)) != len(comp.seeds):
            errors.append("complexity.seeds must be distinct.")
        if comp.slope_min >= comp.slope_max:
            errors.append("complexity.slope_min must be below slope_max.")
        optimizer("complexity", comp.optimizer)

        col = self.collapse
        if not isinstance(col.p_grid, list) or not col.p_grid:
            errors.append("collapse.p_grid must be a non-empty list.")
        elif any(
            isinstance(p, bool) or not isinstance(p, int | float) or not 0.0 < p <= 0.5
            for p in col.p_grid
        ):
            errors.append("collapse.p_grid entries must lie in (0, 0.5].")
        for attr in ("ensemble", "T", "visit_T", "visit_window", "demo_T"):
            count(f"collapse.{attr}", getattr(col, attr))
        count("collapse.visit_K", col.visit_K, minimum=2)
        count("collapse.demo_K", col.demo_K, minimum=2)
        for attr in ("exponent_tol", "symmetric_tol", "demo_gt_scale"):
            positive(f"collapse.{attr}", getattr(col, attr))
        if not isinstance(col.t0_fraction, int | float) or not (
            0.0 < col.t0_fraction < 1.0
        ):
            errors.append("collapse.t0_fraction must lie in (0, 1).")
        # decades are divided by log t
        grid("collapse.decades", col.decades, minimum=2)
        if (
            isinstance(col.decades, list)
            and isinstance(col.T, int)
            and any(isinstance(d, int) and d > col.T + 1 for d in col.decades)
        ):
            errors.append("collapse.decades must not exceed T + 1.")
        grid("collapse.visit_seeds", col.visit_seeds, minimum=0)
        if isinstance(col.visit_seeds, list) and len(set(col.visit_seeds)) != len(
            col.visit_seeds
        ):
            errors.append("collapse.visit_seeds must be distinct.")
        if (
            isinstance(col.visit_T, int)
            and isinstance(col.visit_window, int)
            and col.visit_T < 2 * col.visit_window
        ):
            errors.append("collapse.visit_T must be at least twice visit_window.")
        if col.start_prompt is not None:
            grid("collapse.start_prompt", col.start_prompt, minimum=0)
            if (
                isinstance(col.start_prompt, list)
                and isinstance(col.demo_K, int)
                and any(
                    isinstance(t, int) and t >= col.demo_K for t in col.start_prompt
                )
            ):
                errors.append("collapse.start_prompt tokens must lie below demo_K.")
        optimizer("collapse", col.optimizer)

        pos = self.positional
        count("positional.K", pos.K, minimum=2)
        count("positional.L", pos.L, minimum=2)
        count("positional.n_trials", pos.n_trials)
        positive("positional.tol", pos.tol)

        return errors


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment run: its kind, configuration, seed and output directory."""

    kind: ExperimentKind
    config: LabConfig
    out_dir: Path | None = None

    @property
    def master_seed(self) -> int:
        return self.config.master_seed

    @property
    def spec_hash(self) -> str:
        return self.config.spec_hash(self.kind)

    def require_valid(self) -> None:
        """Raise ConfigurationError if the configuration does not validate."""
        errors = self.config.validate()
        if errors:
            raise ConfigurationError("; ".join(errors))
