"""Context-conditioned Markov chain (CCMC) transition laws.

The next state out of x_L is drawn from the base-chain column pi_{x_L}
reweighted by the prompt's token frequencies m(X):

    P(x_{L+1} = j | X) = m_j * pi_{x_L, j} / (m^T pi_{x_L})

The positional variant further scales each key position by factors (a, b, V)
induced by absolute positional embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from .core import (
    CcmcLabError,
    FloatArray,
    FrequencyVector,
    Prompt,
    TransitionMatrix,
    ValidationError,
    frequency_vector,
    sample_categorical,
)

logger = logging.getLogger(__name__)


class DegenerateMaskError(CcmcLabError):
    """Raised when the frequency mask annihilates the whole base-chain column."""


@dataclass(frozen=True, eq=False)
class CcmcModel:
    """A CCMC defined by its base chain P."""

    P: TransitionMatrix

    @property
    def K(self) -> int:
        return self.P.K


@dataclass(frozen=True, eq=False)
class PositionalCcmcModel:
    """A CCMC whose mask is enriched by positional factors.

    Attributes:
        P: Base chain.
        a: (L,) position weights exp(U W u_L).
        b: (K,) token weights exp(E W u_L).
        V: (L, K) position-token weights exp(U W E^T).
    """

    P: TransitionMatrix
    a: FloatArray
    b: FloatArray
    V: FloatArray

    def __post_init__(self) -> None:
        a = np.array(self.a, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        V = np.array(self.V, dtype=np.float64)
        K = self.P.K
        if a.ndim != 1 or b.shape != (K,) or V.shape != (a.size, K):
            raise ValidationError(
                f"Inconsistent positional shapes: a{a.shape}, b{b.shape}, "
                f"V{V.shape} for K={K}"
            )
        if a.min() <= 0.0 or b.min() <= 0.0 or V.min() <= 0.0:
            raise ValidationError(
                "Positional factors a, b, V must be strictly positive"
            )
        for arr in (a, b, V):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "V", V)

    @property
    def K(self) -> int:
        return self.P.K

    @property
    def L(self) -> int:
        return int(self.a.size)

    @classmethod
    def plain(cls, P: TransitionMatrix, L: int) -> PositionalCcmcModel:
        """Positional model with unit factors; equivalent to the plain CCMC."""
        return cls(P, np.ones(L), np.ones(P.K), np.ones((L, P.K)))


def masked_transition(
    P: TransitionMatrix, m: FrequencyVector | ArrayLike, state: int
) -> FloatArray:
    """Reweight column ``state`` of P by the mask m and renormalize.

    Raises:
        DegenerateMaskError: If m^T pi_state is zero.
    """
    weights = m.weights if isinstance(m, FrequencyVector) else np.asarray(m, float)
    unnormalized = weights * P.column(state)
    total = float(unnormalized.sum())
    if total <= 0.0:
        raise DegenerateMaskError(
            f"Mask annihilates column {state}: m^T pi_{state} = {total!r}"
        )
    return unnormalized / total


def ccmc_next_distribution(model: CcmcModel, prompt: Prompt) -> FloatArray:
    """Next-token distribution of the CCMC given a prompt.

    Cross-attention prompts use key-only frequencies, so the query token
    gets probability zero unless it also occurs among the keys.
    """
    m = frequency_vector(prompt, model.K)
    return masked_transition(model.P, m, prompt.last)


def ccmc_sample_next(
    model: CcmcModel, prompt: Prompt, rng: np.random.Generator
) -> int:
    """Sample the next token from the CCMC."""
    return sample_categorical(ccmc_next_distribution(model, prompt), rng)


def positional_next_distribution(
    model: PositionalCcmcModel, prompt: Prompt
) -> FloatArray:
    """Next-token distribution of the positional CCMC.

    Entry j is proportional to
    ``b_j * pi_{x_L, j} * sum_i a_i * V_{i, x_L} * 1(x_i = j)``
    with i running over the key positions of the prompt.

    Raises:
        ValidationError: If the prompt length differs from the model's L.
        DegenerateMaskError: If the normalizer is zero.
    """
    if len(prompt) != model.L:
        raise ValidationError(
            f"Positional model expects prompts of length {model.L}, got {len(prompt)}"
        )
    prompt.validate(model.K)
    query = prompt.last
    keys = np.asarray(prompt.keys, dtype=np.int64)
    position_mass = model.a[: keys.size] * model.V[: keys.size, query]
    mask = np.bincount(keys, weights=position_mass, minlength=model.K)
    unnormalized = model.b * model.P.column(query) * mask
    total = float(unnormalized.sum())
    if total <= 0.0:
        raise DegenerateMaskError(
            f"Positional mask annihilates column {query}: normalizer {total!r}"
        )
    return unnormalized / total
