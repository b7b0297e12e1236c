"""Shared data model: vocabulary, prompts, stochastic matrices and sampling.

Tokens are 0-based everywhere in code. The 1-based prompt ``[1, 2, 1]`` of
the usual notation is written ``(0, 1, 0)`` here.

Transition matrices are column-stochastic: column ``i`` is the distribution
of the next state when the current state is ``i``.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

logger = logging.getLogger(__name__)

# Tolerances
VALIDATION_TOL = 1e-12  # column sums, distribution weights
SAMPLING_TOL = 1e-9  # probability vectors handed to the sampler
ZERO_PROB = 1e-15  # below this a probability counts as an exact zero

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]


class CcmcLabError(Exception):
    """Base class for all errors raised by ccmc_lab."""


class ValidationError(CcmcLabError, ValueError):
    """Raised when a token, prompt or probability vector is malformed."""


class AttnVariant(StrEnum):
    """Which tokens act as attention keys.

    SELF: every token of the prompt, including the query (last) token.
    CROSS: every token except the query.
    """

    SELF = "self"
    CROSS = "cross"


def make_rng(master_seed: int, *trial_key: int) -> np.random.Generator:
    """Return the PRNG stream owned by one trial.

    The stream is a counter-based Philox generator keyed by a SeedSequence
    hash of ``(master_seed, *trial_key)``, so trials are independent and can
    be evaluated in any order or in parallel.
    """
    seq = np.random.SeedSequence([int(master_seed), *(int(k) for k in trial_key)])
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class Prompt:
    """A finite token sequence together with its attention variant."""

    tokens: tuple[int, ...]
    variant: AttnVariant = AttnVariant.SELF

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "variant", AttnVariant(self.variant))
        minimum = 1 if self.variant is AttnVariant.SELF else 2
        if len(self.tokens) < minimum:
            raise ValidationError(
                f"{self.variant.value}-attention prompt needs at least "
                f"{minimum} token(s), got {len(self.tokens)}"
            )

    @classmethod
    def parse(cls, text: str, variant: AttnVariant = AttnVariant.SELF) -> Prompt:
        """Parse whitespace-separated 0-based token ids."""
        try:
            tokens = tuple(int(t) for t in text.split())
        except ValueError as e:
            raise ValidationError(f"Malformed prompt {text!r}: {e}") from e
        return cls(tokens, variant)

    def __str__(self) -> str:
        return " ".join(str(t) for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def last(self) -> int:
        """The query token x_L."""
        return self.tokens[-1]

    @property
    def keys(self) -> tuple[int, ...]:
        """Tokens counted by the frequency mask."""
        if self.variant is AttnVariant.SELF:
            return self.tokens
        return self.tokens[:-1]

    def validate(self, K: int) -> None:
        """Raise ValidationError unless every token lies in ``[0, K)``."""
        for position, token in enumerate(self.tokens):
            if not 0 <= token < K:
                raise ValidationError(
                    f"Token {token} at position {position} is outside the "
                    f"vocabulary [0, {K})"
                )


@dataclass(frozen=True, eq=False)
class FrequencyVector:
    """Empirical token frequencies m(X) over the counted positions."""

    weights: FloatArray
    length: int

    def __post_init__(self) -> None:
        self.weights.setflags(write=False)


def frequency_vector(prompt: Prompt, K: int) -> FrequencyVector:
    """Compute m(X): token frequencies over the prompt's key positions.

    For self-attention every position counts; for cross-attention the query
    (last) token is excluded.

    Raises:
        ValidationError: If a token is outside the vocabulary.
    """
    prompt.validate(K)
    keys = np.asarray(prompt.keys, dtype=np.int64)
    counts = np.bincount(keys, minlength=K).astype(np.float64)
    return FrequencyVector(weights=counts / keys.size, length=int(keys.size))


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """K×K column-stochastic base chain P.

    Construction only checks the shape; use validate_transition_matrix to
    check stochasticity.
    """

    matrix: FloatArray

    def __post_init__(self) -> None:
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValidationError(
                f"Transition matrix must be square, got shape {matrix.shape}"
            )
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def uniform(cls, K: int) -> TransitionMatrix:
        """Every entry equal to 1/K."""
        return cls(np.full((K, K), 1.0 / K))

    @classmethod
    def from_columns(cls, columns: Sequence[ArrayLike]) -> TransitionMatrix:
        """Build from a list of columns pi_0, ..., pi_{K-1}."""
        return cls(np.column_stack([np.asarray(c, dtype=np.float64) for c in columns]))

    @property
    def K(self) -> int:
        return int(self.matrix.shape[0])

    def column(self, state: int) -> FloatArray:
        """pi_state, the next-state distribution out of ``state``."""
        return self.matrix[:, state]

    @property
    def is_strictly_positive(self) -> bool:
        return bool(self.matrix.min() > 0.0)

    def to_csv(self, path: Path) -> None:
        """Write row-major with header ``k0,...,k{K-1}``."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow([f"k{j}" for j in range(self.K)])
            for row in self.matrix:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: Path) -> TransitionMatrix:
        """Read a matrix written by to_csv."""
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows:
            raise ValidationError(f"{path} is empty")
        try:
            values = [[float(v) for v in row] for row in rows[1:] if row]
        except ValueError as e:
            raise ValidationError(f"Malformed transition matrix in {path}: {e}") from e
        return cls(np.asarray(values, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class TransitionReport:
    """Outcome of validate_transition_matrix."""

    column_sum_deviation: FloatArray
    min_entry: float
    strictly_positive: bool
    errors: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.errors


def validate_transition_matrix(P: TransitionMatrix) -> TransitionReport:
    """Report column-sum deviations, the minimum entry and strict positivity.

    Never raises; failures are listed in ``report.errors``.
    """
    deviation = np.abs(P.matrix.sum(axis=0) - 1.0)
    min_entry = float(P.matrix.min())
    errors: list[str] = [
        f"Column {i} sums to {P.matrix[:, i].sum():.15g} "
        f"(deviation {deviation[i]:.3g})"
        for i in np.flatnonzero(deviation > VALIDATION_TOL)
    ]
    if min_entry < 0.0:
        errors.append(f"Negative entry {min_entry:.3g}")
    return TransitionReport(
        column_sum_deviation=deviation,
        min_entry=min_entry,
        strictly_positive=min_entry > 0.0,
        errors=errors,
    )


def check_probability_vector(probs: ArrayLike, tol: float = SAMPLING_TOL) -> FloatArray:
    """Return ``probs`` as a float array, raising unless it is a distribution."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError(f"Probability vector must be 1-D and non-empty: {p!r}")
    if np.any(p < 0.0):
        raise ValidationError(f"Probability vector has a negative entry: {p!r}")
    total = float(p.sum())
    if abs(total - 1.0) > tol:
        raise ValidationError(f"Probability vector sums to {total!r}, not 1")
    return p


def inverse_cdf(weights: FloatArray, u: FloatArray) -> IntArray:
    """Vectorized categorical draw from unnormalized row weights.

    Args:
        weights: (E, K) nonnegative weights, each row with a positive sum.
        u: (E,) uniforms in [0, 1).

    Returns:
        (E,) indices; index k is returned with probability weights[k]/sum.
        Zero-weight entries are never returned.
    """
    cdf = np.cumsum(weights, axis=1)
    threshold = u * cdf[:, -1]
    index = np.count_nonzero(cdf <= threshold[:, None], axis=1)
    return np.minimum(index, weights.shape[1] - 1).astype(np.int64)


def sample_categorical(probs: ArrayLike, rng: np.random.Generator) -> int:
    """Draw one token index with probability ``probs[k]``.

    Consumes exactly one uniform from ``rng``.

    Raises:
        ValidationError: If probs has a negative entry or does not sum to 1.
    """
    p = check_probability_vector(probs)
    u = np.array([rng.random()])
    return int(inverse_cdf(p[None, :], u)[0])


@dataclass(frozen=True)
class PromptDistribution:
    """Finite-support distribution over prompts sharing one attention variant."""

    support: tuple[tuple[Prompt, float], ...]
    K: int

    def __post_init__(self) -> None:
        support = tuple((prompt, float(weight)) for prompt, weight in self.support)
        object.__setattr__(self, "support", support)
        if not support:
            raise ValidationError("Prompt distribution needs a non-empty support")
        variants = {prompt.variant for prompt, _ in support}
        if len(variants) != 1:
            raise ValidationError("All prompts in a support must share one variant")
        seen: set[tuple[int, ...]] = set()
        for prompt, weight in support:
            prompt.validate(self.K)
            if weight < 0.0:
                raise ValidationError(f"Negative weight {weight} for prompt {prompt}")
            if prompt.tokens in seen:
                raise ValidationError(f"Duplicate prompt {prompt} in support")
            seen.add(prompt.tokens)
        total = sum(weight for _, weight in support)
        if abs(total - 1.0) > VALIDATION_TOL:
            raise ValidationError(f"Prompt weights sum to {total!r}, not 1")

    @classmethod
    def uniform(cls, prompts: Iterable[Prompt], K: int) -> PromptDistribution:
        """Equal weight on every prompt."""
        prompts = list(prompts)
        weight = 1.0 / len(prompts) if prompts else 0.0
        return cls(tuple((p, weight) for p in prompts), K)

    @property
    def variant(self) -> AttnVariant:
        return self.support[0][0].variant

    @property
    def prompts(self) -> list[Prompt]:
        return [prompt for prompt, _ in self.support]

    @property
    def weights(self) -> FloatArray:
        return np.array([weight for _, weight in self.support], dtype=np.float64)

    def sample(self, n: int, rng: np.random.Generator) -> list[Prompt]:
        """Draw ``n`` IID prompts."""
        weights = self.weights
        u = rng.random(n)
        index = inverse_cdf(np.broadcast_to(weights, (n, weights.size)), u)
        prompts = self.prompts
        return [prompts[i] for i in index]


def cyclic_shift_distribution(
    K: int, variant: AttnVariant = AttnVariant.SELF
) -> PromptDistribution:
    """Uniform distribution over every cyclic shift of (0..K-1) followed by a query.

    There are K*K prompts; every prompt contains the whole vocabulary among
    its keys, so every co-occurrence graph is complete.
    """
    base = list(range(K))
    prompts = [
        Prompt(tuple(base[s:] + base[:s] + [query]), variant)
        for query in range(K)
        for s in range(K)
    ]
    return PromptDistribution.uniform(prompts, K)


def random_prompt_distribution(
    K: int,
    n_prompts: int,
    length: int,
    rng: np.random.Generator,
    variant: AttnVariant = AttnVariant.SELF,
    q: ArrayLike | None = None,
) -> PromptDistribution:
    """Uniform distribution over ``n_prompts`` prompts with IID tokens drawn from q.

    Duplicate draws are merged, so the support may hold fewer prompts.
    """
    probs = (
        np.full(K, 1.0 / K) if q is None else check_probability_vector(q, SAMPLING_TOL)
    )
    seen: dict[tuple[int, ...], None] = {}
    for _ in range(n_prompts):
        u = rng.random(length)
        tokens = inverse_cdf(np.broadcast_to(probs, (length, K)), u)
        seen.setdefault(tuple(int(t) for t in tokens), None)
    return PromptDistribution.uniform((Prompt(t, variant) for t in seen), K)


@dataclass(frozen=True)
class Dataset:
    """(prompt, next token) samples over a vocabulary of size K.

    Samples whose label is not among the prompt's keys are allowed here;
    they make the likelihood infinite and are reported by the loss.
    """

    samples: tuple[tuple[Prompt, int], ...]
    K: int

    def __post_init__(self) -> None:
        samples = tuple((prompt, int(label)) for prompt, label in self.samples)
        object.__setattr__(self, "samples", samples)
        for index, (prompt, label) in enumerate(samples):
            prompt.validate(self.K)
            if not 0 <= label < self.K:
                raise ValidationError(
                    f"Label {label} of sample {index} is outside [0, {self.K})"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def unsupported_samples(self) -> list[int]:
        """Indices of samples whose label never occurs among the keys."""
        return [
            index
            for index, (prompt, label) in enumerate(self.samples)
            if label not in prompt.keys
        ]

    def to_csv(self, path: Path) -> None:
        """Write columns ``prompt,next``; prompts as space-separated ids."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["prompt", "next"])
            for prompt, label in self.samples:
                writer.writerow([str(prompt), label])

    @classmethod
    def from_csv(
        cls, path: Path, K: int, variant: AttnVariant = AttnVariant.SELF
    ) -> Dataset:
        """Read a dataset written by to_csv."""
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            try:
                samples = tuple(
                    (Prompt.parse(row["prompt"], variant), int(row["next"]))
                    for row in reader
                )
            except (KeyError, ValueError) as e:
                raise ValidationError(f"Malformed dataset in {path}: {e}") from e
        logger.debug("Read %d samples from %s", len(samples), path)
        return cls(samples, K)
