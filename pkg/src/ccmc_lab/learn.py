"""Likelihood objectives, projected gradient descent and the KL excess-loss split.

Under weight tying the attention likelihood of a sample depends on W only
through the logit block B = E W E^T and on the prompt only through its key
frequencies m and query q:

    log p(y | X) = log m_y + B[y, q] - logsumexp_k(log m_k + B[k, q])

Every objective is therefore stored as weighted groups of (m, q, target
distribution). Empirical data, exact population expectations and single
trajectories only differ in how the groups are built.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp, rel_entr

from .attention import (
    AttentionWeights,
    ConfigurationError,
    EmbeddingConfig,
    WeightsLike,
    logit_block,
    project_to_SE,
)
from .ccmc import CcmcModel, ccmc_next_distribution
from .core import (
    AttnVariant,
    CcmcLabError,
    Dataset,
    FloatArray,
    IntArray,
    PromptDistribution,
    TransitionMatrix,
    ValidationError,
    check_probability_vector,
    frequency_vector,
)

logger = logging.getLogger(__name__)

MIN_LABEL_PROB = 1e-300
LOSS_INCREASE_TOL = 1e-12

# (prompt distribution, ground-truth chain) of an exact population objective
PopulationSpec = tuple[PromptDistribution, TransitionMatrix]


class InfiniteLossError(CcmcLabError):
    """Raised when a sample's label has (numerically) zero probability."""

    def __init__(self, message: str, sample_index: int) -> None:
        super().__init__(message)
        self.sample_index = sample_index


class StepSizeError(CcmcLabError):
    """Raised when the loss keeps increasing after every allowed step halving."""


@dataclass(frozen=True)
class LossReport:
    """Objective value in nats, projected-gradient norm and sample count."""

    value: float
    grad_norm: float
    n_samples: int


@dataclass(frozen=True)
class OptimizerSettings:
    """Constant-step gradient descent settings.

    The step is halved whenever an iteration would increase the loss; after
    ``max_halvings`` halvings a StepSizeError is raised.
    """

    step_size: float = 0.1
    max_iters: int = 200_000
    grad_tol: float = 1e-9
    record_every: int = 100
    max_halvings: int = 5

    def __post_init__(self) -> None:
        if self.step_size <= 0 or self.grad_tol <= 0:
            raise ValidationError("step_size and grad_tol must be positive")
        if self.max_iters < 1 or self.record_every < 1 or self.max_halvings < 0:
            raise ValidationError(
                "max_iters and record_every must be positive, max_halvings >= 0"
            )


@dataclass(frozen=True, eq=False)
class FrequencyObjective:
    """Weighted cross-entropy sum_s w_s * sum_y T[s, y] * (-log p_s(y)).

    Attributes:
        masks: (S, K) key frequencies m per group.
        queries: (S,) query token per group.
        weights: (S,) nonnegative group weights summing to 1.
        targets: (S, K) label distribution per group.
        n_samples: Number of samples (or support prompts) behind the groups.
        row_group: (N,) group of every original sample, for error reports.
        row_support: (N, K) which labels each original sample puts mass on.
    """

    masks: FloatArray
    queries: IntArray
    weights: FloatArray
    targets: FloatArray
    n_samples: int
    row_group: IntArray
    row_support: NDArray[np.bool_]

    @property
    def K(self) -> int:
        return int(self.masks.shape[1])

    def _check_config(self, cfg: EmbeddingConfig) -> None:
        cfg.require_valid()
        if cfg.U is not None:
            raise ConfigurationError(
                "Likelihood objectives support position-free configurations only"
            )
        if cfg.K != self.K:
            raise ConfigurationError(
                f"Objective uses K={self.K} but the config has K={cfg.K}"
            )

    def log_probs(self, cfg: EmbeddingConfig, W: WeightsLike) -> FloatArray:
        """(S, K) model log-probabilities; -inf where the mask is zero."""
        self._check_config(cfg)
        logits = logit_block(cfg, W)[:, self.queries].T
        log_mask = np.full_like(self.masks, -np.inf)
        np.log(self.masks, out=log_mask, where=self.masks > 0)
        scores = logits + log_mask
        return scores - logsumexp(scores, axis=1, keepdims=True)

    def _check_support(self, log_p: FloatArray) -> None:
        bad = (self.targets > 0) & ~(log_p > math.log(MIN_LABEL_PROB))
        if bad.any():
            rows = bad[self.row_group] & self.row_support
            index = int(np.argwhere(rows)[0][0])
            raise InfiniteLossError(
                f"Sample {index} has a label with probability <= {MIN_LABEL_PROB}",
                sample_index=index,
            )

    def _weighted_rows(self, values: FloatArray) -> FloatArray:
        """Row sums of targets * values, skipping zero targets (no 0 * inf)."""
        positive = self.targets > 0
        product = np.multiply(
            self.targets, values, out=np.zeros_like(self.targets), where=positive
        )
        summed: FloatArray = product.sum(axis=1)
        return summed

    def value(self, cfg: EmbeddingConfig, W: WeightsLike) -> float:
        log_p = self.log_probs(cfg, W)
        self._check_support(log_p)
        per_group = -self._weighted_rows(log_p)
        return float(self.weights @ per_group)

    def value_and_grad(
        self, cfg: EmbeddingConfig, W: WeightsLike
    ) -> tuple[float, FloatArray]:
        """Objective value and its S_E-projected gradient with respect to W."""
        log_p = self.log_probs(cfg, W)
        self._check_support(log_p)
        per_group = -self._weighted_rows(log_p)
        residual = self.weights[:, None] * (np.exp(log_p) - self.targets)
        grad_B_t = np.zeros((self.K, self.K))
        np.add.at(grad_B_t, self.queries, residual)
        grad = cfg.E.T @ grad_B_t.T @ cfg.E
        return float(self.weights @ per_group), project_to_SE(cfg, grad).W

    def expected_kl(self, cfg: EmbeddingConfig, W: WeightsLike) -> float:
        """sum_s w_s KL(T_s || p_s), the excess over the best achievable loss."""
        log_p = self.log_probs(cfg, W)
        self._check_support(log_p)
        log_t = np.zeros_like(self.targets)
        np.log(self.targets, out=log_t, where=self.targets > 0)
        kl = self._weighted_rows(log_t - log_p)
        return float(self.weights @ kl)


def _group(
    masks: FloatArray,
    queries: IntArray,
    weights: FloatArray,
    targets: FloatArray,
    n_samples: int,
) -> FrequencyObjective:
    """Merge rows that share (mask, query); targets combine by weight."""
    index: dict[tuple[bytes, int], int] = {}
    order: list[int] = []
    row_group = np.empty(masks.shape[0], dtype=np.int64)
    merged_w: list[float] = []
    merged_t: list[FloatArray] = []
    for row in range(masks.shape[0]):
        key = (masks[row].tobytes(), int(queries[row]))
        slot = index.get(key)
        if slot is None:
            slot = index[key] = len(order)
            order.append(row)
            merged_w.append(float(weights[row]))
            merged_t.append(weights[row] * targets[row])
        else:
            merged_w[slot] += float(weights[row])
            merged_t[slot] = merged_t[slot] + weights[row] * targets[row]
        row_group[row] = slot
    w = np.asarray(merged_w)
    t = np.asarray(merged_t)
    nonzero = w > 0
    t[nonzero] /= w[nonzero, None]
    rows = np.asarray(order, dtype=np.int64)
    return FrequencyObjective(
        masks=masks[rows],
        queries=queries[rows],
        weights=w,
        targets=t,
        n_samples=n_samples,
        row_group=row_group,
        row_support=(targets > 0) & (weights[:, None] > 0),
    )


def empirical_objective(data: Dataset) -> FrequencyObjective:
    """Mean NLL over the samples of ``data``."""
    n = len(data)
    if n == 0:
        raise ValidationError("Empirical objective needs at least one sample")
    K = data.K
    masks = np.array([frequency_vector(p, K).weights for p, _ in data.samples])
    queries = np.array([p.last for p, _ in data.samples], dtype=np.int64)
    targets = np.zeros((n, K))
    targets[np.arange(n), [label for _, label in data.samples]] = 1.0
    return _group(masks, queries, np.full(n, 1.0 / n), targets, n)


def population_objective(
    dist: PromptDistribution, gt: TransitionMatrix
) -> FrequencyObjective:
    """Exact expected NLL under prompts from ``dist`` and labels from gt's CCMC."""
    model = CcmcModel(gt)
    prompts = dist.prompts
    masks = np.array([frequency_vector(p, dist.K).weights for p in prompts])
    queries = np.array([p.last for p in prompts], dtype=np.int64)
    targets = np.array([ccmc_next_distribution(model, p) for p in prompts])
    return _group(masks, queries, dist.weights, targets, len(prompts))


def trajectory_objective(
    tokens: Sequence[int] | IntArray,
    initial_length: int,
    K: int,
    variant: AttnVariant = AttnVariant.SELF,
) -> FrequencyObjective:
    """Mean NLL of the (prefix, next) pairs of one autoregressive trajectory.

    Sample i pairs the prefix tokens[:initial_length + i] with the label
    tokens[initial_length + i]. Frequencies come from running counts, so
    the cost is linear in the trajectory length.
    """
    seq = np.asarray(tokens, dtype=np.int64)
    n = seq.size - initial_length
    if initial_length < 1 or n < 1:
        raise ValidationError(
            "Trajectory must hold a start prompt and one generated token"
        )
    if seq.min() < 0 or seq.max() >= K:
        raise ValidationError(f"Trajectory has tokens outside [0, {K})")
    onehot = np.eye(K)[seq]
    counts = np.cumsum(onehot, axis=0)[initial_length - 1 : -1]
    lengths = np.arange(initial_length, seq.size, dtype=np.float64)
    queries = seq[initial_length - 1 : -1]
    if variant is AttnVariant.CROSS:
        counts = counts - onehot[initial_length - 1 : -1]
        lengths = lengths - 1.0
        if lengths.min() < 1.0:
            raise ValidationError(
                "Cross-attention trajectories need a start prompt of length >= 2"
            )
    masks = counts / lengths[:, None]
    targets = onehot[initial_length:]
    return _group(masks, queries, np.full(n, 1.0 / n), targets, n)


def nll_loss(cfg: EmbeddingConfig, W: WeightsLike, data: Dataset) -> LossReport:
    """Empirical negative log-likelihood of the attention model on ``data``.

    Raises:
        InfiniteLossError: If some label has probability <= 1e-300.
    """
    objective = empirical_objective(data)
    value, grad = objective.value_and_grad(cfg, W)
    return LossReport(value, float(np.linalg.norm(grad)), objective.n_samples)


def population_loss(
    cfg: EmbeddingConfig,
    W: WeightsLike,
    dist: PromptDistribution,
    gt: TransitionMatrix,
) -> LossReport:
    """Exact population NLL, enumerating the finite prompt support."""
    objective = population_objective(dist, gt)
    value, grad = objective.value_and_grad(cfg, W)
    return LossReport(value, float(np.linalg.norm(grad)), objective.n_samples)


def loss_gradient(
    cfg: EmbeddingConfig,
    W: WeightsLike,
    objective: FrequencyObjective | Dataset | PopulationSpec,
) -> FloatArray:
    """S_E-projected gradient of an empirical or population objective."""
    if isinstance(objective, Dataset):
        objective = empirical_objective(objective)
    elif isinstance(objective, tuple):
        objective = population_objective(*objective)
    return objective.value_and_grad(cfg, W)[1]


def expected_kl(
    cfg: EmbeddingConfig,
    W: WeightsLike,
    dist: PromptDistribution,
    gt: TransitionMatrix,
) -> float:
    """E_X[KL(pi^X_gt || pi^X_W)], the population excess loss of W."""
    return population_objective(dist, gt).expected_kl(cfg, W)


def kl_divergence(p: ArrayLike, q: ArrayLike) -> float:
    """KL(p || q) in nats with 0 log 0 = 0.

    Raises:
        InfiniteLossError: If q_j = 0 < p_j; sample_index is j.
    """
    p_arr = check_probability_vector(p)
    q_arr = check_probability_vector(q)
    if p_arr.shape != q_arr.shape:
        raise ValidationError(f"Shape mismatch {p_arr.shape} vs {q_arr.shape}")
    terms = rel_entr(p_arr, q_arr)
    if np.isinf(terms).any():
        j = int(np.flatnonzero(np.isinf(terms))[0])
        raise InfiniteLossError(f"q_{j} = 0 while p_{j} > 0", sample_index=j)
    return max(float(terms.sum()), 0.0)


def finite_difference_gradient(
    cfg: EmbeddingConfig,
    W: WeightsLike,
    objective: FrequencyObjective,
    h: float = 1e-5,
) -> FloatArray:
    """Central-difference gradient of the objective, entry by entry."""
    base = np.array(W.W if isinstance(W, AttentionWeights) else W, dtype=np.float64)
    grad = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        bump = np.zeros_like(base)
        bump[index] = h
        grad[index] = (
            objective.value(cfg, base + bump) - objective.value(cfg, base - bump)
        ) / (2 * h)
    return grad


def convexity_gap(
    cfg: EmbeddingConfig,
    objective: FrequencyObjective,
    W1: WeightsLike,
    W2: WeightsLike,
    lam: float,
) -> float:
    """lam*L(W1) + (1-lam)*L(W2) - L(lam*W1 + (1-lam)*W2); >= 0 for convex L."""
    a = np.asarray(W1.W if isinstance(W1, AttentionWeights) else W1, dtype=np.float64)
    b = np.asarray(W2.W if isinstance(W2, AttentionWeights) else W2, dtype=np.float64)
    mix = lam * a + (1.0 - lam) * b
    return (
        lam * objective.value(cfg, a)
        + (1.0 - lam) * objective.value(cfg, b)
        - objective.value(cfg, mix)
    )


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss: float
    grad_norm: float


@dataclass
class OptimizationTrace:
    """Loss and gradient-norm history of a gradient-descent run."""

    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""
    iterations: int = 0
    step_size: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @property
    def final_grad_norm(self) -> float:
        return self.records[-1].grad_norm

    def is_monotone(self) -> bool:
        """Recorded losses never increase beyond the tolerance."""
        losses = [r.loss for r in self.records]
        return all(b <= a + LOSS_INCREASE_TOL for a, b in zip(losses, losses[1:]))

    def to_csv(self, path: Path) -> None:
        """Write ``iter,loss,grad_norm``."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["iter", "loss", "grad_norm"])
            for r in self.records:
                writer.writerow([r.iteration, repr(r.loss), repr(r.grad_norm)])


def gradient_descent(
    cfg: EmbeddingConfig,
    objective: FrequencyObjective,
    settings: OptimizerSettings | None = None,
) -> tuple[AttentionWeights, OptimizationTrace]:
    """Minimize the objective over S_E from W_0 = 0 with a constant step.

    Stops when the projected gradient norm drops to ``grad_tol`` (reason
    "grad_tol") or after ``max_iters`` iterations (reason "max_iters").

    Raises:
        InfiniteLossError: If the objective is infinite at W = 0.
        StepSizeError: If the loss still increases after max_halvings halvings.
    """
    settings = settings or OptimizerSettings()
    W = np.zeros((cfg.d, cfg.d))
    value, grad = objective.value_and_grad(cfg, W)
    step = settings.step_size
    halvings = 0
    trace = OptimizationTrace()
    iteration = 0
    while True:
        grad_norm = float(np.linalg.norm(grad))
        at_tol = grad_norm <= settings.grad_tol
        at_limit = iteration >= settings.max_iters
        if iteration % settings.record_every == 0 or at_tol or at_limit:
            trace.records.append(TraceRecord(iteration, value, grad_norm))
        if at_tol or at_limit:
            trace.converged = at_tol
            trace.stop_reason = "grad_tol" if at_tol else "max_iters"
            break
        while True:
            candidate = W - step * grad
            try:
                new_value, new_grad = objective.value_and_grad(cfg, candidate)
            except InfiniteLossError:
                new_value, new_grad = math.inf, grad
            if new_value <= value + LOSS_INCREASE_TOL:
                break
            halvings += 1
            if halvings > settings.max_halvings:
                raise StepSizeError(
                    f"Loss increased at iteration {iteration} after {halvings - 1} "
                    f"halvings (step {step:.3g}); the step size is too large"
                )
            step /= 2.0
            logger.warning("Loss increased; halving step size to %.3g", step)
        W, value, grad = candidate, new_value, new_grad
        iteration += 1
    trace.iterations = iteration
    trace.step_size = step
    logger.debug(
        "Gradient descent stopped (%s) after %d iterations, loss %.6g",
        trace.stop_reason,
        iteration,
        value,
    )
    return AttentionWeights(W, in_subspace=True), trace
