"""One-layer attention and its exact correspondence with CCMC base chains.

Notation: E (K×d) holds token embeddings e_k as rows, C (K×d) is the
classifier, W (d×d) the key-query weights, and the optional U (L×d) holds
absolute positional embeddings u_i. The model emits C X^T softmax(X W x_L).

Under weight tying (C E^T = I with rank-K embeddings) the output equals the
CCMC law over the base chain P^W whose column i is softmax(E W e_i). Only the
projection of W onto

    S_E = span{(e_i - e_j) e_k^T}

affects the output; inside S_E the map W -> P^W is a bijection onto the
strictly positive column-stochastic matrices.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike
from scipy.special import softmax

from .ccmc import PositionalCcmcModel
from .core import (
    AttnVariant,
    CcmcLabError,
    FloatArray,
    Prompt,
    TransitionMatrix,
    ValidationError,
    validate_transition_matrix,
)

logger = logging.getLogger(__name__)

ASSUMPTION_TOL = 1e-10
CLAMP_TOL = 1e-12


class ConfigurationError(CcmcLabError, ValueError):
    """Raised when an embedding or experiment configuration is unusable."""


class BijectionDomainError(CcmcLabError, ValueError):
    """Raised when a transition matrix has zero entries and has no weights."""


@dataclass(frozen=True, eq=False)
class EmbeddingConfig:
    """Token embeddings E, classifier C and optional positional embeddings U."""

    E: FloatArray
    C: FloatArray
    U: FloatArray | None = None

    def __post_init__(self) -> None:
        E = np.array(self.E, dtype=np.float64)
        C = np.array(self.C, dtype=np.float64)
        if E.ndim != 2 or C.shape != E.shape:
            raise ConfigurationError(
                f"E and C must both be K×d matrices, got {E.shape} and {C.shape}"
            )
        E.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "C", C)
        if self.U is not None:
            U = np.array(self.U, dtype=np.float64)
            if U.ndim != 2 or U.shape[1] != E.shape[1]:
                raise ConfigurationError(
                    f"U must be an L×{E.shape[1]} matrix, got {U.shape}"
                )
            U.setflags(write=False)
            object.__setattr__(self, "U", U)

    @property
    def K(self) -> int:
        return int(self.E.shape[0])

    @property
    def d(self) -> int:
        return int(self.E.shape[1])

    @property
    def L(self) -> int | None:
        return None if self.U is None else int(self.U.shape[0])

    @functools.cached_property
    def assumption_errors(self) -> list[str]:
        """Violations of weight tying and of the positional classifier condition."""
        errors: list[str] = []
        if self.d < self.K or np.linalg.matrix_rank(self.E) < self.K:
            errors.append(
                f"Embeddings must be linearly independent (rank {self.K}), "
                f"got rank {np.linalg.matrix_rank(self.E)} in dimension {self.d}"
            )
        tying = np.abs(self.C @ self.E.T - np.eye(self.K)).max()
        if tying > ASSUMPTION_TOL:
            errors.append(f"C E^T deviates from the identity by {tying:.3g}")
        if self.U is not None:
            leak = np.abs(self.C @ self.U.T).max() if self.U.size else 0.0
            if leak > ASSUMPTION_TOL:
                errors.append(f"C U^T deviates from zero by {leak:.3g}")
        return errors

    def validate(self) -> list[str]:
        """Return assumption violations; empty if the config is usable."""
        return list(self.assumption_errors)

    def require_valid(self) -> None:
        """Raise ConfigurationError if validate() reports anything."""
        if self.assumption_errors:
            raise ConfigurationError("; ".join(self.assumption_errors))

    @functools.cached_property
    def right_inverse(self) -> FloatArray:
        """R (d×K) with E R = I, the least-squares pseudo-inverse of E."""
        return np.linalg.pinv(self.E)

    @functools.cached_property
    def has_orthonormal_rows(self) -> bool:
        return bool(np.allclose(self.E @ self.E.T, np.eye(self.K), atol=1e-14))

    @functools.cached_property
    def subspace_basis(self) -> FloatArray:
        """Orthonormal basis of vec(S_E), one column per basis matrix.

        Built from the generators (e_i - e_0) e_k^T, which span S_E.
        """
        E = self.E
        generators = [
            np.outer(E[i] - E[0], E[k]).ravel()
            for i in range(1, self.K)
            for k in range(self.K)
        ]
        if not generators:
            return np.zeros((self.d * self.d, 0))
        basis: FloatArray = scipy.linalg.orth(np.column_stack(generators))
        logger.debug("S_E basis of dimension %d built for d=%d", basis.shape[1], self.d)
        return basis


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Key-query weights W (d×d)."""

    W: FloatArray
    in_subspace: bool = False

    def __post_init__(self) -> None:
        W = np.array(self.W, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValidationError(f"W must be square, got shape {W.shape}")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)


WeightsLike = AttentionWeights | ArrayLike


def _matrix(W: WeightsLike) -> FloatArray:
    if isinstance(W, AttentionWeights):
        return W.W
    return np.asarray(W, dtype=np.float64)


def make_canonical_config(K: int, L: int | None = None) -> EmbeddingConfig:
    """Exact weight-tied config: E = C = I_K, or [I_K | 0] with U = [0 | I_L]."""
    if K < 1:
        raise ConfigurationError(f"Vocabulary size must be positive, got {K}")
    if L is None:
        return EmbeddingConfig(E=np.eye(K), C=np.eye(K))
    d = K + L
    E = np.zeros((K, d))
    E[:, :K] = np.eye(K)
    U = np.zeros((L, d))
    U[:, K:] = np.eye(L)
    return EmbeddingConfig(E=E, C=E.copy(), U=U)


def logit_block(cfg: EmbeddingConfig, W: WeightsLike) -> FloatArray:
    """B = E W E^T; B[k, q] is the score of key token k under query token q."""
    return cfg.E @ _matrix(W) @ cfg.E.T


def _embed(cfg: EmbeddingConfig, prompt: Prompt) -> FloatArray:
    prompt.validate(cfg.K)
    X = cfg.E[list(prompt.tokens)]
    if cfg.U is not None:
        if len(prompt) > cfg.U.shape[0]:
            raise ValidationError(
                f"Prompt length {len(prompt)} exceeds the {cfg.U.shape[0]} "
                "positional embeddings"
            )
        X = X + cfg.U[: len(prompt)]
    return X


def self_attention_output(
    cfg: EmbeddingConfig, W: WeightsLike, prompt: Prompt
) -> FloatArray:
    """f_W(X) = X^T softmax(X W x_L) over every position of the prompt."""
    X = _embed(cfg, prompt)
    scores = X @ _matrix(W) @ X[-1]
    return X.T @ softmax(scores)


def cross_attention_output(
    cfg: EmbeddingConfig, W: WeightsLike, prompt: Prompt
) -> FloatArray:
    """f_W(X) = Xbar^T softmax(Xbar W x_L) with keys Xbar = all but the query."""
    if len(prompt) < 2:
        raise ValidationError(
            "Cross-attention needs at least one key besides the query"
        )
    X = _embed(cfg, prompt)
    keys = X[:-1]
    scores = keys @ _matrix(W) @ X[-1]
    return keys.T @ softmax(scores)


def attention_next_distribution(
    cfg: EmbeddingConfig, W: WeightsLike, prompt: Prompt
) -> FloatArray:
    """C f_W(X), the next-token distribution emitted by the attention layer.

    Tiny negative entries from rounding are clamped to zero.

    Raises:
        ConfigurationError: If cfg violates weight tying.
    """
    cfg.require_valid()
    if prompt.variant is AttnVariant.SELF:
        output = self_attention_output(cfg, W, prompt)
    else:
        output = cross_attention_output(cfg, W, prompt)
    probs = cfg.C @ output
    if probs.min() < -CLAMP_TOL:
        logger.warning("Classifier output has entry %.3g below zero", probs.min())
    return np.clip(probs, 0.0, None)


def transition_from_weights(cfg: EmbeddingConfig, W: WeightsLike) -> TransitionMatrix:
    """P^W with column i = softmax(E W e_i); always strictly positive."""
    return TransitionMatrix(softmax(logit_block(cfg, W), axis=0))


def project_to_SE(cfg: EmbeddingConfig, W: WeightsLike) -> AttentionWeights:
    """Orthogonal (Frobenius) projection of W onto S_E.

    The discarded component only adds a per-column constant to the logits
    E W E^T, so the model output is unchanged.
    """
    matrix = _matrix(W)
    if cfg.has_orthonormal_rows:
        B = cfg.E @ matrix @ cfg.E.T
        centered = B - B.mean(axis=0, keepdims=True)
        projected = cfg.E.T @ centered @ cfg.E
    else:
        basis = cfg.subspace_basis
        projected = (basis @ (basis.T @ matrix.ravel())).reshape(matrix.shape)
    return AttentionWeights(projected, in_subspace=True)


def weights_from_transition(
    cfg: EmbeddingConfig, P: TransitionMatrix
) -> AttentionWeights:
    """The unique W in S_E with P^W = P.

    Solves E W E^T = log P up to per-column constants through the right
    inverse of E, then projects onto S_E.

    Raises:
        BijectionDomainError: If P has a zero entry.
        ValidationError: If P is not column-stochastic.
        ConfigurationError: If cfg violates weight tying.
    """
    cfg.require_valid()
    if P.K != cfg.K:
        raise ValidationError(
            f"P is {P.K}×{P.K} but the vocabulary has {cfg.K} tokens"
        )
    report = validate_transition_matrix(P)
    if not report.valid:
        raise ValidationError("; ".join(report.errors))
    if not report.strictly_positive:
        raise BijectionDomainError(
            f"P has a zero entry (min {report.min_entry!r}); no finite weights exist"
        )
    logits = np.log(P.matrix)
    logits -= logits.mean(axis=0, keepdims=True)
    R = cfg.right_inverse
    return project_to_SE(cfg, R @ logits @ R.T)


def positional_model_from_weights(
    cfg: EmbeddingConfig, W: WeightsLike
) -> PositionalCcmcModel:
    """Positional CCMC (P^W, a, b, V) reproducing attention with positions.

    a = exp(U W u_L), b = exp(E W u_L), V = exp(U W E^T); the equivalence
    holds for prompts of the full length L.

    Raises:
        ConfigurationError: If cfg has no positional embeddings or violates
            either assumption.
    """
    if cfg.U is None:
        raise ConfigurationError("Positional model requires positional embeddings U")
    cfg.require_valid()
    matrix = _matrix(W)
    u_last = cfg.U[-1]
    return PositionalCcmcModel(
        P=transition_from_weights(cfg, matrix),
        a=np.exp(cfg.U @ matrix @ u_last),
        b=np.exp(cfg.E @ matrix @ u_last),
        V=np.exp(cfg.U @ matrix @ cfg.E.T),
    )
