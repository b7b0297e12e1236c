"""Single-trajectory autoregressive generation and collapse diagnostics.

A trajectory starts from a prompt X_1 and appends y_t ~ CCMC(X_t) at every
step, so X_{t+1} = [X_t, y_t]. Step t refers to the prefix X_t, which holds
|X_1| + t - 1 tokens; a run of n generated tokens ends at step n + 1.

Ensembles are simulated in lockstep. Each member owns its generator and
draws uniforms in fixed blocks, so a member's path does not depend on which
other members share its batch.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from .attention import EmbeddingConfig, WeightsLike, transition_from_weights
from .ccmc import CcmcModel, DegenerateMaskError
from .core import (
    AttnVariant,
    CcmcLabError,
    Dataset,
    FloatArray,
    IntArray,
    Prompt,
    TransitionMatrix,
    ValidationError,
    inverse_cdf,
    validate_transition_matrix,
)

logger = logging.getLogger(__name__)

UNIFORM_BLOCK = 4096
MIN_FIT_LENGTH = 1000
WEAK_TOKEN = 1


class CoverageError(CcmcLabError, ValueError):
    """Raised when the start prompt does not contain the whole vocabulary."""


class FitError(CcmcLabError, ValueError):
    """Raised when a power-law fit window holds non-positive frequencies."""


def default_checkpoints(
    n: int, growth: float = 1.2, extra: Iterable[int] = ()
) -> IntArray:
    """Steps ceil(growth**j), every power of ten, ``extra`` and the final step n + 1."""
    last = n + 1
    points = {1, last}
    j = 0
    while (t := math.ceil(growth**j)) <= last:
        points.add(t)
        j += 1
    power = 10
    while power <= last:
        points.add(power)
        power *= 10
    points.update(int(t) for t in extra if 1 <= int(t) <= last)
    return np.array(sorted(points), dtype=np.int64)


def window_checkpoints(n: int, window: int) -> IntArray:
    """Window boundaries 1, 1 + window, 1 + 2*window, ... up to n + 1."""
    if window < 1:
        raise ValidationError(f"Window must be positive, got {window}")
    return np.arange(1, n + 2, window, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TrajectoryStats:
    """Running counts recorded at checkpoint steps.

    Attributes:
        times: (C,) checkpoint steps t, increasing.
        visit_counts: (C, K) S_{k,t}, occurrences of token k in X_t.
        transition_counts: (C, K, K) cumulative (state, next) counts of the
            generated steps before t.
        length: Number of generated tokens n.
        initial_length: |X_1|.
    """

    times: IntArray
    visit_counts: IntArray
    transition_counts: IntArray
    length: int
    initial_length: int

    @property
    def K(self) -> int:
        return int(self.visit_counts.shape[1])

    @property
    def freq_series(self) -> FloatArray:
        """(C, K) frequencies m(X_t) at each checkpoint."""
        totals = self.visit_counts.sum(axis=1, keepdims=True)
        return self.visit_counts / totals

    @property
    def final_transition_counts(self) -> IntArray:
        return self.transition_counts[-1]

    def index_of(self, t: int) -> int:
        """Position of step ``t`` in ``times``; ValidationError if not recorded."""
        position = int(np.searchsorted(self.times, t))
        if position >= self.times.size or self.times[position] != t:
            raise ValidationError(f"Step {t} is not a recorded checkpoint")
        return position

    def to_csv(self, path: Path, weak_token: int = WEAK_TOKEN) -> None:
        """Write ``t,freq_0,...,freq_{K-1},weakweak_count``."""
        freqs = self.freq_series
        weakweak = weak_transition_count(self, weak_token)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            header = [f"freq_{k}" for k in range(self.K)]
            writer.writerow(["t", *header, "weakweak_count"])
            for row, t in enumerate(self.times):
                writer.writerow(
                    [int(t), *(repr(float(v)) for v in freqs[row]), int(weakweak[row])]
                )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One generated trajectory; ``tokens`` is kept only when requested."""

    stats: TrajectoryStats
    variant: AttnVariant
    tokens: IntArray | None = None

    @property
    def token_array(self) -> IntArray:
        """The full token sequence X_{n+1}."""
        if self.tokens is None:
            raise ValidationError("Trajectory was generated without keep_tokens")
        return self.tokens

    def dataset(self) -> Dataset:
        """The n (prefix, next) pairs; quadratic in n, so built on demand."""
        start = self.stats.initial_length
        seq = [int(t) for t in self.token_array]
        samples = tuple(
            (Prompt(tuple(seq[:i]), self.variant), seq[i])
            for i in range(start, len(seq))
        )
        return Dataset(samples, self.stats.K)


@dataclass(frozen=True)
class CollapseFit:
    """Least-squares power law m(t) ~ t**fitted_exponent over ``fit_window``."""

    fitted_exponent: float
    fit_window: tuple[int, int]
    r_squared: float
    n_points: int
    theoretical_q: float | None = None


def weak_token_setup(p: float) -> CcmcModel:
    """K=2 chain with both columns [1 - p, p]; token 1 is the weak token.

    Raises:
        ValidationError: If p is outside (0, 1/2].
    """
    if not 0.0 < p <= 0.5:
        raise ValidationError(f"Weak-token probability must lie in (0, 1/2], got {p}")
    return CcmcModel(TransitionMatrix.from_columns([[1.0 - p, p], [1.0 - p, p]]))


def collapse_rate(p: float) -> float:
    """q = (1 - 2p) / (1 - p), the decay rate of the weak token's frequency."""
    return (1.0 - 2.0 * p) / (1.0 - p)


def _resolve_chain(
    model: CcmcModel | tuple[EmbeddingConfig, WeightsLike], allow_zero_entries: bool
) -> TransitionMatrix:
    if isinstance(model, CcmcModel):
        P = model.P
    else:
        cfg, W = model
        P = transition_from_weights(cfg, W)
    report = validate_transition_matrix(P)
    if not report.valid:
        raise ValidationError("; ".join(report.errors))
    if not report.strictly_positive and not allow_zero_entries:
        raise ValidationError(
            "Trajectory generation needs a strictly positive chain "
            "(pass allow_zero_entries=True to simulate zero entries)"
        )
    return P


def generate_ensemble(
    model: CcmcModel | tuple[EmbeddingConfig, WeightsLike],
    X1: Prompt,
    n: int,
    rngs: Sequence[np.random.Generator],
    *,
    checkpoints: IntArray | None = None,
    keep_tokens: bool = False,
    require_coverage: bool = True,
    allow_zero_entries: bool = False,
) -> list[Trajectory]:
    """Generate one trajectory per generator, all of length n.

    Args:
        model: Base chain, or an attention config and weights inducing one.
        X1: Start prompt; its variant selects self- or cross-attention keys.
        n: Number of tokens to generate.
        rngs: One generator per ensemble member.
        checkpoints: Steps to record; default_checkpoints(n) when omitted.
        keep_tokens: Store every generated token.
        require_coverage: Demand that X1 contains every token.
        allow_zero_entries: Accept chains with zero entries.

    Raises:
        CoverageError: If X1 misses a token and coverage is required.
        DegenerateMaskError: If a zero-entry chain reaches a dead end.
    """
    if n < 0:
        raise ValidationError(f"Trajectory length must be nonnegative, got {n}")
    P = _resolve_chain(model, allow_zero_entries)
    K = P.K
    X1.validate(K)
    initial = np.bincount(np.asarray(X1.tokens, dtype=np.int64), minlength=K)
    if require_coverage and (initial == 0).any():
        missing = np.flatnonzero(initial == 0).tolist()
        raise CoverageError(f"Start prompt {X1} misses tokens {missing}")
    times = default_checkpoints(n) if checkpoints is None else np.unique(checkpoints)
    if times.size and (times[0] < 1 or times[-1] > n + 1):
        raise ValidationError(f"Checkpoints must lie in [1, {n + 1}]")

    members = len(rngs)
    rows = np.arange(members)
    counts = np.tile(initial, (members, 1)).astype(np.int64)
    state = np.full(members, X1.last, dtype=np.int64)
    transitions = np.zeros((members, K, K), dtype=np.int64)
    visit_log = np.zeros((members, times.size, K), dtype=np.int64)
    transition_log = np.zeros((members, times.size, K, K), dtype=np.int64)
    tokens = None
    if keep_tokens:
        tokens = np.empty((members, len(X1) + n), dtype=np.int64)
        tokens[:, : len(X1)] = X1.tokens
    columns = P.matrix.T
    cross = X1.variant is AttnVariant.CROSS
    uniforms = np.empty((members, UNIFORM_BLOCK))

    slot = 0
    if times.size and times[0] == 1:
        visit_log[:, 0] = counts
        slot = 1
    for step in range(n):
        offset = step % UNIFORM_BLOCK
        if offset == 0:
            for member, rng in enumerate(rngs):
                uniforms[member] = rng.random(UNIFORM_BLOCK)
        keys = counts - np.eye(K, dtype=np.int64)[state] if cross else counts
        weights = keys * columns[state]
        if allow_zero_entries and (weights.sum(axis=1) <= 0).any():
            raise DegenerateMaskError(
                f"Mask annihilates the chain column at step {step + 1}"
            )
        nxt = inverse_cdf(weights, uniforms[:, offset])
        transitions[rows, state, nxt] += 1
        counts[rows, nxt] += 1
        state = nxt
        if tokens is not None:
            tokens[:, len(X1) + step] = nxt
        if slot < times.size and times[slot] == step + 2:
            visit_log[:, slot] = counts
            transition_log[:, slot] = transitions
            slot += 1

    logger.debug("Generated %d trajectories of %d tokens (K=%d)", members, n, K)
    return [
        Trajectory(
            stats=TrajectoryStats(
                times=times,
                visit_counts=visit_log[member],
                transition_counts=transition_log[member],
                length=n,
                initial_length=len(X1),
            ),
            variant=X1.variant,
            tokens=None if tokens is None else tokens[member],
        )
        for member in range(members)
    ]


def generate_trajectory(
    model: CcmcModel | tuple[EmbeddingConfig, WeightsLike],
    X1: Prompt,
    n: int,
    rng: np.random.Generator,
    *,
    checkpoints: IntArray | None = None,
    keep_tokens: bool = True,
    require_coverage: bool = True,
    allow_zero_entries: bool = False,
) -> Trajectory:
    """Generate a single trajectory; see generate_ensemble for the arguments."""
    return generate_ensemble(
        model,
        X1,
        n,
        [rng],
        checkpoints=checkpoints,
        keep_tokens=keep_tokens,
        require_coverage=require_coverage,
        allow_zero_entries=allow_zero_entries,
    )[0]


def ensemble_mean_frequency(stats: Sequence[TrajectoryStats]) -> FloatArray:
    """(C, K) mean of m(X_t) across an ensemble sharing one checkpoint grid."""
    if not stats:
        raise ValidationError("Ensemble is empty")
    times = stats[0].times
    for s in stats[1:]:
        if not np.array_equal(s.times, times):
            raise ValidationError("Ensemble members use different checkpoints")
    return np.mean([s.freq_series for s in stats], axis=0)


def fit_power_law(
    times: IntArray, values: FloatArray, t0_fraction: float
) -> CollapseFit:
    """Fit log(values) = c + slope * log(times) over t in [t0_fraction*T, T]."""
    if not 0.0 < t0_fraction < 1.0:
        raise ValidationError(f"t0_fraction must lie in (0, 1), got {t0_fraction}")
    T = int(times[-1])
    if T < MIN_FIT_LENGTH:
        raise FitError(f"Trajectory too short for a fit: {T} < {MIN_FIT_LENGTH}")
    start = math.ceil(t0_fraction * T)
    in_window = times >= start
    window_values = values[in_window]
    if window_values.size < 2:
        raise FitError(f"Fit window [{start}, {T}] holds fewer than two checkpoints")
    if (window_values <= 0).any():
        raise FitError(f"Zero frequency inside the fit window [{start}, {T}]")
    result = scipy_stats.linregress(np.log(times[in_window]), np.log(window_values))
    return CollapseFit(
        fitted_exponent=float(result.slope),
        fit_window=(int(times[in_window][0]), T),
        r_squared=float(result.rvalue**2),
        n_points=int(window_values.size),
    )


def fit_collapse_exponent(
    stats: TrajectoryStats | Sequence[TrajectoryStats],
    token: int,
    t0_fraction: float = 0.1,
    p: float | None = None,
) -> CollapseFit:
    """Power-law exponent of the (ensemble-mean) frequency of ``token``.

    Ensembles are averaged before fitting. Pass ``p`` for the K=2 weak-token
    setup to record the theoretical rate q.

    Raises:
        FitError: If the window holds a zero frequency or the run is short.
    """
    ensemble = [stats] if isinstance(stats, TrajectoryStats) else list(stats)
    mean = ensemble_mean_frequency(ensemble)
    fit = fit_power_law(ensemble[0].times, mean[:, token], t0_fraction)
    if p is None:
        return fit
    if ensemble[0].K != 2:
        raise ValidationError("The theoretical rate applies to the K=2 setup only")
    return CollapseFit(
        fitted_exponent=fit.fitted_exponent,
        fit_window=fit.fit_window,
        r_squared=fit.r_squared,
        n_points=fit.n_points,
        theoretical_q=collapse_rate(p),
    )


def weak_transition_count(
    stats: TrajectoryStats, weak_token: int = WEAK_TOKEN
) -> IntArray:
    """Cumulative weak -> weak transitions at every checkpoint."""
    return stats.transition_counts[:, weak_token, weak_token]


def weakweak_growth(
    stats: Sequence[TrajectoryStats],
    steps: Sequence[int],
    weak_token: int = WEAK_TOKEN,
) -> FloatArray:
    """Ensemble-mean weak -> weak count over log t at each of ``steps``.

    The mean is used rather than the median: at small p most members have
    no weak -> weak event yet, and the median then jumps on a single one.

    Raises:
        ValidationError: If the ensemble is empty, a step is not recorded,
            or a step is below 2.
    """
    if not stats:
        raise ValidationError("Ensemble is empty")
    if any(t < 2 for t in steps):
        raise ValidationError(f"Steps must be at least 2 for log t, got {steps}")
    counts = np.array(
        [
            [weak_transition_count(s, weak_token)[s.index_of(int(t))] for t in steps]
            for s in stats
        ],
        dtype=np.float64,
    )
    return counts.mean(axis=0) / np.log(np.asarray(steps, dtype=np.float64))


def visit_growth_check(stats: TrajectoryStats, window: int) -> np.ndarray:
    """(K, W) booleans: whether S_{k,t} grew inside each successive window.

    Window j spans steps [1 + j*window, 1 + (j+1)*window]; both ends must
    be recorded checkpoints (see window_checkpoints).

    Raises:
        ValidationError: If the trajectory is shorter than two windows or a
            boundary was not recorded.
    """
    if stats.length < 2 * window:
        raise ValidationError(
            f"Trajectory of {stats.length} steps is shorter than "
            f"two windows of {window}"
        )
    boundaries = window_checkpoints(stats.length, window)
    counts = stats.visit_counts[[stats.index_of(int(t)) for t in boundaries]]
    return (np.diff(counts, axis=0) > 0).T
