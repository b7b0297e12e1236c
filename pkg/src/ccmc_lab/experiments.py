"""Experiment drivers: each is a pure function of (spec, master seed).

Every trial draws from its own stream ``make_rng(master_seed, stream, ...)``
so trials can run on any number of threads and still aggregate to the same
tables.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

from .attention import (
    AttentionWeights,
    EmbeddingConfig,
    attention_next_distribution,
    make_canonical_config,
    positional_model_from_weights,
    project_to_SE,
    transition_from_weights,
    weights_from_transition,
)
from .ccmc import (
    CcmcModel,
    PositionalCcmcModel,
    ccmc_next_distribution,
    positional_next_distribution,
)
from .config import (
    CollapseConfig,
    ComplexityConfig,
    ConsistencyConfig,
    EquivalenceConfig,
    ExperimentKind,
    ExperimentSpec,
    PositionalConfig,
)
from .core import (
    AttnVariant,
    Dataset,
    FloatArray,
    Prompt,
    PromptDistribution,
    TransitionMatrix,
    ValidationError,
    cyclic_shift_distribution,
    inverse_cdf,
    make_rng,
    random_prompt_distribution,
)
from .executor import TrialExecutor, split_evenly
from .graph import predict_consistency
from .learn import (
    FrequencyObjective,
    InfiniteLossError,
    StepSizeError,
    convexity_gap,
    empirical_objective,
    expected_kl,
    finite_difference_gradient,
    gradient_descent,
    loss_gradient,
    population_objective,
    trajectory_objective,
)
from .results import (
    STATUS_CENSORED,
    STATUS_OK,
    STATUS_OPTIMIZER,
    STATUS_REPORT,
    STATUS_TOLERANCE,
    CheckResult,
    ExperimentResult,
    PlotSeries,
    PlotSpec,
    ResultTable,
)
from .trajectory import (
    Trajectory,
    collapse_rate,
    default_checkpoints,
    ensemble_mean_frequency,
    fit_collapse_exponent,
    generate_ensemble,
    generate_trajectory,
    visit_growth_check,
    weak_token_setup,
    weak_transition_count,
    weakweak_growth,
    window_checkpoints,
)

logger = logging.getLogger(__name__)

# PRNG stream ids, the first trial-key component of every make_rng call
STREAM_AGREEMENT = 1
STREAM_ZERO = 2
STREAM_ROUNDTRIP = 3
STREAM_NULLSPACE = 4
STREAM_POSITIONAL = 5
STREAM_CONSISTENCY = 6
STREAM_PROBES = 7
STREAM_COMPLEXITY_GT = 8
STREAM_COMPLEXITY = 9
STREAM_COLLAPSE = 10
STREAM_VISITS = 11
STREAM_DEMO = 12

ZERO_WEIGHTS_TOL = 1e-14
CONVEXITY_TOL = 1e-12
GRADIENT_FLOOR = 1e-4
EXCESS_FLOOR = -1e-12
ENSEMBLE_CHUNK = 64  # members per lockstep batch

Driver = Callable[[ExperimentSpec, TrialExecutor | None], ExperimentResult]
ProbeObjective = tuple[
    EmbeddingConfig, FrequencyObjective, PromptDistribution, TransitionMatrix
]


def _status(passed: bool) -> str:
    return STATUS_OK if passed else STATUS_TOLERANCE


def _verdict(result: ExperimentResult) -> str:
    return "pass" if result.passed else "FAIL"


def _tv(p: FloatArray, q: FloatArray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def _max_dev(p: FloatArray, q: FloatArray) -> float:
    return float(np.abs(p - q).max())


def _random_weights(rng: np.random.Generator, d: int, scale: float) -> FloatArray:
    return scale * rng.standard_normal((d, d))


def _random_prompt(
    rng: np.random.Generator, K: int, variant: AttnVariant, max_length: int
) -> Prompt:
    minimum = 1 if variant is AttnVariant.SELF else 2
    length = int(rng.integers(minimum, max_length + 1))
    return Prompt(tuple(int(t) for t in rng.integers(0, K, size=length)), variant)


def _general_config(
    rng: np.random.Generator, K: int, extra_dims: int
) -> EmbeddingConfig:
    """Random full-rank E in K×(K+extra_dims) with the tied classifier (E E^T)^-1 E."""
    E = rng.standard_normal((K, K + extra_dims))
    return EmbeddingConfig(E=E, C=np.linalg.solve(E @ E.T, E))


def _ground_truth(
    cfg: EmbeddingConfig, rng: np.random.Generator, scale: float
) -> tuple[AttentionWeights, TransitionMatrix]:
    """W_gt = projection of a scaled standard-normal matrix, gt = P^{W_gt}."""
    W_gt = project_to_SE(cfg, _random_weights(rng, cfg.d, scale))
    return W_gt, transition_from_weights(cfg, W_gt)


def _below(name: str, values: Sequence[float], tol: float) -> CheckResult:
    worst = float(np.max(values)) if len(values) else math.nan
    return CheckResult(name, passed=bool(worst < tol), value=worst, threshold=tol)


def _flatten(chunks: Sequence[Sequence[dict[str, Any]]]) -> list[dict[str, Any]]:
    return [row for chunk in chunks for row in chunk]


def _metadata(spec: ExperimentSpec) -> dict[str, Any]:
    return {
        "kind": spec.kind.value,
        "spec_hash": spec.spec_hash,
        "master_seed": spec.master_seed,
    }


def _executor(spec: ExperimentSpec, executor: TrialExecutor | None) -> TrialExecutor:
    return executor or TrialExecutor(spec.config.threads)


# Equivalence


def _agreement_trial(
    seed: int, eq: EquivalenceConfig
) -> Callable[[tuple[int, int]], list[dict[str, Any]]]:
    def run(key: tuple[int, int]) -> list[dict[str, Any]]:
        K, index = key
        rng = make_rng(seed, STREAM_AGREEMENT, K, index)
        configs = (
            ("canonical", make_canonical_config(K)),
            ("general", _general_config(rng, K, eq.extra_dims)),
        )
        rows = []
        for config_name, cfg in configs:
            W = _random_weights(rng, cfg.d, eq.weight_scale)
            model = CcmcModel(transition_from_weights(cfg, W))
            for variant in AttnVariant:
                worst = 0.0
                for _ in range(eq.n_prompts):
                    prompt = _random_prompt(rng, K, variant, eq.max_prompt_length)
                    deviation = _max_dev(
                        attention_next_distribution(cfg, W, prompt),
                        ccmc_next_distribution(model, prompt),
                    )
                    worst = max(worst, deviation)
                rows.append(
                    {
                        "K": K,
                        "trial": index,
                        "config": config_name,
                        "variant": variant.value,
                        "max_dev": worst,
                        "status": _status(worst < eq.tol),
                    }
                )
        return rows

    return run


def _roundtrip_trial(
    seed: int, eq: EquivalenceConfig
) -> Callable[[tuple[int, int]], dict[str, Any]]:
    def run(key: tuple[int, int]) -> dict[str, Any]:
        K, index = key
        rng = make_rng(seed, STREAM_ROUNDTRIP, K, index)
        cfg = make_canonical_config(K)
        P = TransitionMatrix(rng.dirichlet(np.ones(K), size=K).T)
        back = transition_from_weights(cfg, weights_from_transition(cfg, P))
        p_dev = _max_dev(back.matrix, P.matrix)
        W = project_to_SE(cfg, _random_weights(rng, K, eq.weight_scale))
        recovered = weights_from_transition(cfg, transition_from_weights(cfg, W))
        w_dev = float(np.linalg.norm(recovered.W - W.W))
        return {
            "K": K,
            "trial": index,
            "p_max_dev": p_dev,
            "w_frobenius_dev": w_dev,
            "status": _status(p_dev < eq.tol and w_dev < eq.roundtrip_weight_tol),
        }

    return run


def _nullspace_trial(
    seed: int, eq: EquivalenceConfig
) -> Callable[[int], dict[str, Any]]:
    def run(index: int) -> dict[str, Any]:
        K = eq.K_grid[index % len(eq.K_grid)]
        rng = make_rng(seed, STREAM_NULLSPACE, index)
        if index % 2:
            config_name, cfg = "general", _general_config(rng, K, eq.extra_dims)
        else:
            config_name, cfg = "canonical", make_canonical_config(K)
        W = _random_weights(rng, cfg.d, eq.weight_scale)
        noise = _random_weights(rng, cfg.d, eq.weight_scale)
        orthogonal = noise - project_to_SE(cfg, noise).W
        variant = AttnVariant.SELF if index % 4 < 2 else AttnVariant.CROSS
        prompt = _random_prompt(rng, K, variant, eq.max_prompt_length)
        deviation = _max_dev(
            attention_next_distribution(cfg, W, prompt),
            attention_next_distribution(cfg, W + orthogonal, prompt),
        )
        return {
            "trial": index,
            "K": K,
            "config": config_name,
            "variant": variant.value,
            "max_dev": deviation,
            "status": _status(deviation < eq.nullspace_tol),
        }

    return run


def _zero_weight_rows(seed: int, eq: EquivalenceConfig) -> list[dict[str, Any]]:
    rows = []
    for K in eq.K_grid:
        cfg = make_canonical_config(K)
        model = CcmcModel(TransitionMatrix.uniform(K))
        rng = make_rng(seed, STREAM_ZERO, K)
        for variant in AttnVariant:
            worst = 0.0
            for _ in range(eq.n_prompts):
                prompt = _random_prompt(rng, K, variant, eq.max_prompt_length)
                deviation = _max_dev(
                    attention_next_distribution(cfg, np.zeros((K, K)), prompt),
                    ccmc_next_distribution(model, prompt),
                )
                worst = max(worst, deviation)
            rows.append(
                {
                    "K": K,
                    "variant": variant.value,
                    "max_dev": worst,
                    "status": _status(worst < ZERO_WEIGHTS_TOL),
                }
            )
    return rows


def _positional_trial(
    seed: int, pos: PositionalConfig
) -> Callable[[int], dict[str, Any]]:
    def run(index: int) -> dict[str, Any]:
        rng = make_rng(seed, STREAM_POSITIONAL, index)
        cfg = make_canonical_config(pos.K, pos.L)
        variant = AttnVariant.SELF if index % 2 == 0 else AttnVariant.CROSS
        W = _random_weights(rng, cfg.d, pos.weight_scale)
        tokens = tuple(int(t) for t in rng.integers(0, pos.K, size=pos.L))
        prompt = Prompt(tokens, variant)
        model = positional_model_from_weights(cfg, W)
        expected = positional_next_distribution(model, prompt)
        deviation = _max_dev(expected, attention_next_distribution(cfg, W, prompt))

        zero_cfg = EmbeddingConfig(E=cfg.E, C=cfg.C, U=np.zeros((pos.L, cfg.d)))
        plain_cfg = EmbeddingConfig(E=cfg.E, C=cfg.C)
        zero_model = positional_model_from_weights(zero_cfg, W)
        zero_dev = _max_dev(
            positional_next_distribution(zero_model, prompt),
            attention_next_distribution(plain_cfg, W, prompt),
        )

        shifts = np.exp(rng.normal(size=3))
        shifted = PositionalCcmcModel(
            P=model.P,
            a=model.a * shifts[0],
            b=model.b * shifts[1],
            V=model.V * shifts[2],
        )
        shift_dev = _max_dev(positional_next_distribution(shifted, prompt), expected)
        return {
            "trial": index,
            "variant": variant.value,
            "max_dev": deviation,
            "zero_u_dev": zero_dev,
            "shift_dev": shift_dev,
            "status": _status(max(deviation, zero_dev, shift_dev) < pos.tol),
        }

    return run


def _positional_battery(
    seed: int, pos: PositionalConfig, executor: TrialExecutor
) -> tuple[ResultTable, list[CheckResult]]:
    table = ResultTable(
        "positional",
        ["trial", "variant", "max_dev", "zero_u_dev", "shift_dev", "status"],
    )
    trials = list(range(pos.n_trials))
    for row in executor.map_trials(_positional_trial(seed, pos), trials):
        table.add_row(**row)
    checks = [
        _below("positional_max_dev", table.column("max_dev"), pos.tol),
        _below("positional_zero_u_dev", table.column("zero_u_dev"), pos.tol),
        _below("positional_shift_dev", table.column("shift_dev"), pos.tol),
    ]
    return table, checks


def run_equivalence(
    spec: ExperimentSpec, executor: TrialExecutor | None = None
) -> ExperimentResult:
    """Attention-vs-CCMC agreement, round trips, null-space and positional batteries.

    The round trips go P -> W -> P and W -> P -> W on the canonical config.
    """
    spec.require_valid()
    eq = spec.config.equivalence
    seed = spec.master_seed
    pool = _executor(spec, executor)
    logger.info(
        "Equivalence: K grid %s, %d weights x %d prompts",
        eq.K_grid,
        eq.n_weights,
        eq.n_prompts,
    )
    result = ExperimentResult(
        ExperimentKind.EQUIVALENCE.value, metadata=_metadata(spec)
    )

    agreement = ResultTable(
        "agreement", ["K", "trial", "config", "variant", "max_dev", "status"]
    )
    keys = [(K, w) for K in eq.K_grid for w in range(eq.n_weights)]
    for row in _flatten(pool.map_trials(_agreement_trial(seed, eq), keys)):
        agreement.add_row(**row)

    zero = ResultTable("zero_weights", ["K", "variant", "max_dev", "status"])
    for row in _zero_weight_rows(seed, eq):
        zero.add_row(**row)

    roundtrip = ResultTable(
        "roundtrip", ["K", "trial", "p_max_dev", "w_frobenius_dev", "status"]
    )
    keys = [(K, i) for K in eq.roundtrip_K_grid for i in range(eq.n_roundtrip)]
    for row in pool.map_trials(_roundtrip_trial(seed, eq), keys):
        roundtrip.add_row(**row)

    nullspace = ResultTable(
        "nullspace", ["trial", "K", "config", "variant", "max_dev", "status"]
    )
    trials = list(range(eq.n_nullspace))
    for row in pool.map_trials(_nullspace_trial(seed, eq), trials):
        nullspace.add_row(**row)

    positional, positional_checks = _positional_battery(
        seed, spec.config.positional, pool
    )

    result.tables = [agreement, zero, roundtrip, nullspace, positional]
    result.checks = [
        _below("agreement_max_dev", agreement.column("max_dev"), eq.tol),
        _below("zero_weights_max_dev", zero.column("max_dev"), ZERO_WEIGHTS_TOL),
        _below("roundtrip_p_max_dev", roundtrip.column("p_max_dev"), eq.tol),
        _below(
            "roundtrip_w_frobenius_dev",
            roundtrip.column("w_frobenius_dev"),
            eq.roundtrip_weight_tol,
        ),
        _below("nullspace_max_dev", nullspace.column("max_dev"), eq.nullspace_tol),
        *positional_checks,
    ]
    logger.info("Equivalence finished: %s", _verdict(result))
    return result


def run_positional(
    spec: ExperimentSpec, executor: TrialExecutor | None = None
) -> ExperimentResult:
    """Positional CCMC against attention with absolute positional embeddings."""
    spec.require_valid()
    pos = spec.config.positional
    logger.info("Positional: K=%d, L=%d, %d trials", pos.K, pos.L, pos.n_trials)
    pool = _executor(spec, executor)
    table, checks = _positional_battery(spec.master_seed, pos, pool)
    result = ExperimentResult(
        ExperimentKind.POSITIONAL.value,
        tables=[table],
        checks=checks,
        metadata=_metadata(spec),
    )
    logger.info("Positional finished: %s", _verdict(result))
    return result


# Consistency


def all_permutations_distribution(K: int) -> PromptDistribution:
    """Uniform over every ordering of the vocabulary, self-attention."""
    return PromptDistribution.uniform(
        (Prompt(p, AttnVariant.SELF) for p in itertools.permutations(range(K))), K
    )


def split_pairs_distribution(K: int) -> PromptDistribution:
    """Cross-attention support whose graphs split into the two vocabulary halves.

    For every query, keys are consecutive pairs inside [0, K // 2) or inside
    [K // 2, K), so each G^(k) has exactly two components. For K = 3 the
    lower half is the single token 0, which then never appears among keys.

    Raises:
        ValidationError: If K < 3.
    """
    if K < 3:
        raise ValidationError(f"The split support needs K >= 3, got {K}")
    half = K // 2
    pairs = [(i, i + 1) for i in range(half - 1)]
    pairs += [(i, i + 1) for i in range(half, K - 1)]
    prompts = [Prompt((a, b, q), AttnVariant.CROSS) for q in range(K) for a, b in pairs]
    return PromptDistribution.uniform(prompts, K)


def _consistency_supports(
    cons: ConsistencyConfig, seed: int, gt_index: int
) -> list[tuple[str, PromptDistribution]]:
    K = cons.K
    iid = random_prompt_distribution(
        K,
        cons.iid_prompts,
        cons.iid_length,
        make_rng(seed, STREAM_CONSISTENCY, gt_index, 1),
    )
    return [
        ("permutations_self", all_permutations_distribution(K)),
        ("cyclic_cross", cyclic_shift_distribution(K, AttnVariant.CROSS)),
        ("split_cross", split_pairs_distribution(K)),
        ("iid_self", iid),
    ]


def _ratio_spread(
    estimate: FloatArray,
    truth: FloatArray,
    components: list[list[int]],
    appears: FloatArray,
) -> float:
    """Largest relative spread of estimate/truth inside one component."""
    spread = 0.0
    for component in components:
        members = [v for v in component if appears[v]]
        if len(members) < 2:
            continue
        ratio = estimate[members] / truth[members]
        spread = max(spread, float(np.ptp(ratio) / ratio.mean()))
    return spread


def _consistency_trial(
    seed: int, cons: ConsistencyConfig
) -> Callable[[int], list[dict[str, Any]]]:
    def run(gt_index: int) -> list[dict[str, Any]]:
        cfg = make_canonical_config(cons.K)
        gt_rng = make_rng(seed, STREAM_CONSISTENCY, gt_index)
        _, gt = _ground_truth(cfg, gt_rng, cons.gt_scale)
        rows = []
        for support_name, dist in _consistency_supports(cons, seed, gt_index):
            verdict = predict_consistency(dist, gt)
            appears = np.zeros((cons.K, cons.K), dtype=bool)
            for prompt, _weight in dist.support:
                appears[prompt.last, list(prompt.keys)] = True
            try:
                W_hat, trace = gradient_descent(
                    cfg, population_objective(dist, gt), cons.optimizer.settings()
                )
            except StepSizeError as e:
                logger.warning("Optimizer failed on %s: %s", support_name, e)
                rows.extend(
                    {
                        "gt_trial": gt_index,
                        "support": support_name,
                        "query": v.query_token,
                        "predicted_connected": v.connected,
                        "components": len(v.components),
                        "tv": math.nan,
                        "ratio_spread": math.nan,
                        "iterations": -1,
                        "status": STATUS_OPTIMIZER,
                    }
                    for v in verdict.per_query
                )
                continue
            estimate = transition_from_weights(cfg, W_hat)
            for v in verdict.per_query:
                k = v.query_token
                tv = _tv(estimate.column(k), gt.column(k))
                spread = _ratio_spread(
                    estimate.column(k), gt.column(k), v.components, appears[k]
                )
                if v.connected:
                    passed = tv < cons.tv_tol
                else:
                    passed = spread < cons.ratio_spread_tol
                rows.append(
                    {
                        "gt_trial": gt_index,
                        "support": support_name,
                        "query": k,
                        "predicted_connected": v.connected,
                        "components": len(v.components),
                        "tv": tv,
                        "ratio_spread": spread,
                        "iterations": trace.iterations,
                        "status": _status(passed),
                    }
                )
        return rows

    return run


def _probe_objectives(seed: int, cons: ConsistencyConfig) -> list[ProbeObjective]:
    cfg = make_canonical_config(cons.K)
    dist = cyclic_shift_distribution(cons.K, AttnVariant.CROSS)
    out = []
    for g in range(cons.n_ground_truths):
        gt_rng = make_rng(seed, STREAM_CONSISTENCY, g)
        _, gt = _ground_truth(cfg, gt_rng, cons.gt_scale)
        out.append((cfg, population_objective(dist, gt), dist, gt))
    return out


def _convexity_probe(
    seed: int, cons: ConsistencyConfig
) -> Callable[[list[int]], tuple[float, float]]:
    objectives = _probe_objectives(seed, cons)

    def run(indices: list[int]) -> tuple[float, float]:
        worst_gap = math.inf
        worst_margin = math.inf
        for i in indices:
            rng = make_rng(seed, STREAM_PROBES, 0, i)
            cfg, objective, _, _ = objectives[i % len(objectives)]
            W1 = project_to_SE(cfg, _random_weights(rng, cfg.d, 1.0))
            W2 = project_to_SE(cfg, _random_weights(rng, cfg.d, 1.0))
            lam = float(rng.uniform(0.0, 1.0))
            gap = convexity_gap(cfg, objective, W1, W2, lam)
            worst_gap = min(worst_gap, gap)
            if np.linalg.norm(W1.W - W2.W) >= 1e-2:
                margin = convexity_gap(cfg, objective, W1, W2, 0.5)
                worst_margin = min(worst_margin, margin)
        return worst_gap, worst_margin

    return run


def _gradient_probe(seed: int) -> Callable[[int], float]:
    def run(index: int) -> float:
        rng = make_rng(seed, STREAM_PROBES, 1, index)
        K = 3
        cfg = make_canonical_config(K)
        _, gt = _ground_truth(cfg, rng, 1.0)
        model = CcmcModel(gt)
        variant = AttnVariant.SELF if index % 2 == 0 else AttnVariant.CROSS
        prompts = cyclic_shift_distribution(K, variant).sample(40, rng)
        laws = np.array([ccmc_next_distribution(model, p) for p in prompts])
        labels = inverse_cdf(laws, rng.random(len(prompts))).tolist()
        data = Dataset(tuple(zip(prompts, labels, strict=True)), K)
        W = _random_weights(rng, K, 1.0)
        analytic = loss_gradient(cfg, W, data)
        numeric = finite_difference_gradient(cfg, W, empirical_objective(data), h=1e-5)
        scale = np.maximum(np.abs(analytic), GRADIENT_FLOOR)
        return float((np.abs(numeric - analytic) / scale).max())

    return run


def _kl_probe(
    seed: int, cons: ConsistencyConfig
) -> Callable[[int], tuple[float, float]]:
    def run(index: int) -> tuple[float, float]:
        rng = make_rng(seed, STREAM_PROBES, 2, index)
        cfg = make_canonical_config(cons.K)
        W_gt, gt = _ground_truth(cfg, rng, cons.gt_scale)
        dist = cyclic_shift_distribution(cons.K, AttnVariant.SELF)
        objective = population_objective(dist, gt)
        W = _random_weights(rng, cfg.d, 1.0)
        excess = objective.value(cfg, W) - objective.value(cfg, W_gt)
        identity_gap = abs(excess - expected_kl(cfg, W, dist, gt))
        orthogonal = _random_weights(rng, cfg.d, 1.0)
        orthogonal = orthogonal - project_to_SE(cfg, orthogonal).W
        null_gap = abs(objective.value(cfg, W + orthogonal) - objective.value(cfg, W))
        return identity_gap, null_gap

    return run


def _probe_table(
    seed: int, cons: ConsistencyConfig, pool: TrialExecutor
) -> tuple[ResultTable, list[CheckResult]]:
    table = ResultTable("probes", ["probe", "trials", "worst", "threshold", "status"])

    chunks = split_evenly(list(range(cons.n_convexity_probes)), pool.threads)
    outcomes = pool.map_trials(_convexity_probe(seed, cons), chunks)
    worst_gap = min(o[0] for o in outcomes)
    worst_margin = min(o[1] for o in outcomes)
    gradient = pool.map_trials(
        _gradient_probe(seed), list(range(cons.n_gradient_checks))
    )
    kl = pool.map_trials(_kl_probe(seed, cons), list(range(cons.n_kl_checks)))

    checks = [
        CheckResult(
            "convexity_gap_min",
            passed=worst_gap >= -CONVEXITY_TOL,
            value=worst_gap,
            threshold=-CONVEXITY_TOL,
        ),
        CheckResult(
            "strict_convexity_margin_min",
            passed=worst_margin > 0.0,
            value=worst_margin,
            threshold=0.0,
        ),
        _below("gradient_rel_error", gradient, cons.gradient_rel_tol),
        _below("excess_kl_identity", [o[0] for o in kl], cons.kl_tol),
        _below("objective_nullspace", [o[1] for o in kl], cons.kl_tol),
    ]
    trials = [
        cons.n_convexity_probes,
        cons.n_convexity_probes,
        cons.n_gradient_checks,
        cons.n_kl_checks,
        cons.n_kl_checks,
    ]
    for check, n in zip(checks, trials, strict=True):
        table.add_row(
            probe=check.name,
            trials=n,
            worst=check.value,
            threshold=check.threshold,
            status=check.status,
        )
    return table, checks


def run_consistency(
    spec: ExperimentSpec, executor: TrialExecutor | None = None
) -> ExperimentResult:
    """Exact-population MLE recovery per query column, plus objective probes.

    Connected columns must be recovered to total variation tv_tol. Columns
    with disconnected graphs are recovered up to one constant per component,
    checked through the spread of estimate/truth ratios. The probes cover
    convexity, the analytic gradient and the excess-loss/KL identity.
    """
    spec.require_valid()
    cons = spec.config.consistency
    seed = spec.master_seed
    pool = _executor(spec, executor)
    logger.info("Consistency: K=%d, %d ground truths", cons.K, cons.n_ground_truths)

    table = ResultTable(
        "columns",
        [
            "gt_trial",
            "support",
            "query",
            "predicted_connected",
            "components",
            "tv",
            "ratio_spread",
            "iterations",
            "status",
        ],
    )
    gt_trials = list(range(cons.n_ground_truths))
    rows = _flatten(pool.map_trials(_consistency_trial(seed, cons), gt_trials))
    for row in rows:
        table.add_row(**row)

    def rows_of(name: str) -> list[dict[str, Any]]:
        return [r for r in rows if r["support"] == name]

    connected_tv = [r["tv"] for r in rows if r["predicted_connected"]]
    split = rows_of("split_cross")
    split_tv = max(r["tv"] for r in split)
    checks = [
        _below("connected_max_tv", connected_tv, cons.tv_tol),
        CheckResult(
            "disconnected_max_tv",
            passed=split_tv > cons.disconnected_tv_min,
            value=split_tv,
            threshold=cons.disconnected_tv_min,
        ),
        _below(
            "disconnected_ratio_spread",
            [r["ratio_spread"] for r in split],
            cons.ratio_spread_tol,
        ),
        CheckResult(
            "predicted_verdicts",
            passed=all(r["predicted_connected"] for r in rows_of("permutations_self"))
            and all(r["predicted_connected"] for r in rows_of("cyclic_cross"))
            and not any(r["predicted_connected"] for r in split),
            detail="permutations and cyclic shifts connected; split pairs disconnected",
        ),
    ]
    probes, probe_checks = _probe_table(seed, cons, pool)

    result = ExperimentResult(
        ExperimentKind.CONSISTENCY.value,
        tables=[table, probes],
        checks=checks + probe_checks,
        metadata=_metadata(spec),
    )
    logger.info("Consistency finished: %s", _verdict(result))
    return result


# Complexity


def _sample_dataset(
    dist: PromptDistribution, model: CcmcModel, n: int, rng: np.random.Generator
) -> Dataset:
    prompts = dist.sample(n, rng)
    laws = {p.tokens: ccmc_next_distribution(model, p) for p in dist.prompts}
    weights = np.array([laws[p.tokens] for p in prompts])
    labels = inverse_cdf(weights, rng.random(n))
    return Dataset(tuple(zip(prompts, labels.tolist(), strict=True)), dist.K)


def _complexity_trial(
    seed: int,
    comp: ComplexityConfig,
    dist: PromptDistribution,
    W_gt: AttentionWeights,
    gt: TransitionMatrix,
) -> Callable[[tuple[int, int]], dict[str, Any]]:
    cfg = make_canonical_config(comp.K)
    model = CcmcModel(gt)
    settings = comp.optimizer.settings()

    def run(key: tuple[int, int]) -> dict[str, Any]:
        n, trial_seed = key
        rng = make_rng(seed, STREAM_COMPLEXITY, n, trial_seed)
        data = _sample_dataset(dist, model, n, rng)
        row: dict[str, Any] = {"n": n, "seed": trial_seed}
        try:
            W_hat, trace = gradient_descent(cfg, empirical_objective(data), settings)
        except (StepSizeError, InfiniteLossError) as e:
            logger.warning("Complexity draw n=%d seed=%d failed: %s", n, trial_seed, e)
            return row | {
                "excess": math.nan,
                "weight_error_sq": math.nan,
                "iterations": -1,
                "status": STATUS_OPTIMIZER,
            }
        try:
            excess = expected_kl(cfg, W_hat, dist, gt)
        except InfiniteLossError:
            excess = math.inf
        status = STATUS_OK
        if trace.stop_reason == "max_iters" or not math.isfinite(excess):
            status = STATUS_CENSORED
            logger.debug(
                "Censored draw n=%d seed=%d (%s)", n, trial_seed, trace.stop_reason
            )
        return row | {
            "excess": excess,
            "weight_error_sq": float(np.linalg.norm(W_hat.W - W_gt.W) ** 2),
            "iterations": trace.iterations,
            "status": status,
        }

    return run


def _median(values: list[float]) -> float:
    return float(np.median(values)) if values else math.nan


def run_complexity(
    spec: ExperimentSpec, executor: TrialExecutor | None = None
) -> ExperimentResult:
    """Median excess population loss of the empirical MLE across a sample-size grid.

    Draws whose optimizer exhausts max_iters (the empirical maximizer lies at
    infinity) or whose excess is not finite are censored: excluded from the
    medians and counted per n.
    """
    spec.require_valid()
    comp = spec.config.complexity
    seed = spec.master_seed
    pool = _executor(spec, executor)
    cfg = make_canonical_config(comp.K)
    dist = cyclic_shift_distribution(comp.K, AttnVariant.SELF)
    gt_rng = make_rng(seed, STREAM_COMPLEXITY_GT)
    W_gt, gt = _ground_truth(cfg, gt_rng, comp.gt_scale)
    logger.info(
        "Complexity: K=%d, n grid %s, %d seeds", comp.K, comp.n_grid, len(comp.seeds)
    )

    draws = ResultTable(
        "draws", ["n", "seed", "excess", "weight_error_sq", "iterations", "status"]
    )
    keys = [(n, s) for n in sorted(comp.n_grid) for s in comp.seeds]
    for row in pool.map_trials(_complexity_trial(seed, comp, dist, W_gt, gt), keys):
        draws.add_row(**row)

    medians = ResultTable(
        "medians",
        [
            "n",
            "median_excess",
            "median_weight_error_sq",
            "used",
            "censored",
            "failed",
        ],
    )
    for n in sorted(comp.n_grid):
        at_n = [r for r in draws.rows if r["n"] == n]
        used = [r for r in at_n if r["status"] == STATUS_OK]
        censored = sum(r["status"] == STATUS_CENSORED for r in at_n)
        failed = sum(r["status"] == STATUS_OPTIMIZER for r in at_n)
        if censored:
            logger.warning(
                "n=%d: %d censored draws excluded from the median", n, censored
            )
        medians.add_row(
            n=n,
            median_excess=_median([r["excess"] for r in used]),
            median_weight_error_sq=_median([r["weight_error_sq"] for r in used]),
            used=len(used),
            censored=censored,
            failed=failed,
        )

    ns = np.array(medians.column("n"), dtype=np.float64)
    med = np.array(medians.column("median_excess"), dtype=np.float64)
    finite = np.isfinite(med) & (med > 0)
    if finite.sum() >= 2:
        slope = float(np.polyfit(np.log(ns[finite]), np.log(med[finite]), 1)[0])
    else:
        slope = math.nan
    decreasing = bool(finite.all() and np.all(np.diff(med) < 0))
    excesses = [r["excess"] for r in draws.rows if r["status"] == STATUS_OK]

    result = ExperimentResult(
        ExperimentKind.COMPLEXITY.value,
        tables=[draws, medians],
        checks=[
            CheckResult(
                "excess_slope",
                passed=comp.slope_min <= slope <= comp.slope_max,
                value=slope,
                threshold=f"[{comp.slope_min}, {comp.slope_max}]",
            ),
            CheckResult("median_excess_decreasing", passed=decreasing),
            CheckResult(
                "excess_nonnegative",
                passed=bool(excesses) and min(excesses) >= EXCESS_FLOOR,
                value=min(excesses) if excesses else math.nan,
                threshold=EXCESS_FLOOR,
            ),
        ],
        plots=[
            PlotSpec(
                "complexity_excess",
                "Median excess loss of the empirical MLE",
                "n",
                "median excess (nats)",
                [
                    PlotSeries(
                        "median excess", ns[finite].tolist(), med[finite].tolist()
                    )
                ],
                xscale="log",
                yscale="log",
            )
        ],
        metadata=_metadata(spec)
        | {
            "censoring": "draws reaching max_iters or with non-finite excess "
            "are excluded from medians",
            "delta": "the confidence level enters the rate only logarithmically; "
            "medians are reported",
        },
    )
    logger.info("Complexity finished: slope %.3f, %s", slope, _verdict(result))
    return result


# Collapse


def _ensemble_runner(
    model: CcmcModel,
    X1: Prompt,
    n: int,
    checkpoints: Any,
    stream: tuple[int, ...],
    seed: int,
) -> Callable[[list[int]], list[Trajectory]]:
    def run(members: list[int]) -> list[Trajectory]:
        rngs = [make_rng(seed, *stream, m) for m in members]
        return generate_ensemble(model, X1, n, rngs, checkpoints=checkpoints)

    return run


def _run_ensemble(
    pool: TrialExecutor,
    model: CcmcModel,
    X1: Prompt,
    n: int,
    checkpoints: Any,
    stream: tuple[int, ...],
    seed: int,
    members: Sequence[int],
) -> list[Trajectory]:
    parts = max(1, min(pool.threads, len(members) // ENSEMBLE_CHUNK))
    chunks = split_evenly(list(members), parts)
    runner = _ensemble_runner(model, X1, n, checkpoints, stream, seed)
    return [t for chunk in pool.map_trials(runner, chunks) for t in chunk]


def _weak_token_study(
    col: CollapseConfig, seed: int, pool: TrialExecutor, result: ExperimentResult
) -> None:
    exponents = ResultTable(
        "exponents",
        [
            "p",
            "theoretical_exponent",
            "fitted_exponent",
            "r_squared",
            "fit_t0",
            "fit_T",
            "status",
        ],
    )
    decades = ResultTable(
        "decades",
        [
            "p",
            "t",
            "mean_ratio",
            "median_weakweak",
            "mean_weakweak",
            "weakweak_over_log_t",
        ],
    )
    curves = ResultTable(
        "curves", ["p", "t", "mean_freq_0", "mean_freq_1", "median_weakweak"]
    )
    freq_plot = PlotSpec(
        "collapse_frequency",
        "Mean weak-token frequency",
        "t",
        "mean m_2(t)",
        xscale="log",
        yscale="log",
    )
    weak_plot = PlotSpec(
        "collapse_weakweak",
        "Median weak-to-weak transitions",
        "log t",
        "count",
        xscale="linear",
    )
    X1 = Prompt((0, 1))
    checkpoints = default_checkpoints(col.T, extra=col.decades)
    for p_index, p in enumerate(col.p_grid):
        ensemble = _run_ensemble(
            pool,
            weak_token_setup(p),
            X1,
            col.T,
            checkpoints,
            (STREAM_COLLAPSE, p_index),
            seed,
            range(col.ensemble),
        )
        stats = [t.stats for t in ensemble]
        times = stats[0].times
        mean = ensemble_mean_frequency(stats)
        weakweak = np.median([weak_transition_count(s) for s in stats], axis=0)
        ratios = np.mean(
            [s.freq_series[:, 1] / s.freq_series[:, 0] for s in stats], axis=0
        )
        expected = -collapse_rate(p)
        tol = col.symmetric_tol if p == 0.5 else col.exponent_tol
        fit = fit_collapse_exponent(stats, token=1, t0_fraction=col.t0_fraction, p=p)
        passed = abs(fit.fitted_exponent - expected) <= tol
        exponents.add_row(
            p=p,
            theoretical_exponent=expected,
            fitted_exponent=fit.fitted_exponent,
            r_squared=fit.r_squared,
            fit_t0=fit.fit_window[0],
            fit_T=fit.fit_window[1],
            status=_status(passed),
        )
        result.checks.append(
            CheckResult(
                f"exponent_p{p:g}",
                passed=passed,
                value=fit.fitted_exponent,
                threshold=f"{expected:.6g} +/- {tol:g}",
            )
        )
        for row, t in enumerate(times):
            curves.add_row(
                p=p,
                t=int(t),
                mean_freq_0=float(mean[row, 0]),
                mean_freq_1=float(mean[row, 1]),
                median_weakweak=float(weakweak[row]),
            )
        at = [int(np.searchsorted(times, d)) for d in col.decades]
        normalized = weakweak_growth(stats, col.decades).tolist()
        for i, value in zip(at, normalized, strict=True):
            decades.add_row(
                p=p,
                t=int(times[i]),
                mean_ratio=float(ratios[i]),
                median_weakweak=float(weakweak[i]),
                mean_weakweak=value * math.log(times[i]),
                weakweak_over_log_t=value,
            )
        if p < 0.5:
            decade_ratios = [float(ratios[i]) for i in at]
            result.checks.append(
                CheckResult(
                    f"ratio_nonincreasing_p{p:g}",
                    passed=all(b <= a for a, b in itertools.pairwise(decade_ratios)),
                    detail=f"mean m_2/m_1 at {col.decades}: {decade_ratios}",
                )
            )
        if not math.isclose(p, 1.0 / 3.0):
            steps = list(itertools.pairwise(normalized))
            if p > 1.0 / 3.0:
                trend = all(b > a for a, b in steps)
                expectation = "increasing"
            else:
                trend = all(b <= a for a, b in steps)
                expectation = "non-increasing"
            result.checks.append(
                CheckResult(
                    f"weakweak_trend_p{p:g}",
                    passed=trend,
                    detail=f"mean count/log t {expectation}: {normalized}",
                )
            )
        label = f"p={p:g}"
        freq_plot.series.append(
            PlotSeries(label, times.tolist(), mean[:, 1].tolist())
        )
        weak_plot.series.append(
            PlotSeries(label, np.log(times).tolist(), weakweak.tolist())
        )
        logger.info(
            "Collapse p=%g: exponent %.3f (expected %.3f)",
            p,
            fit.fitted_exponent,
            expected,
        )
    result.tables.extend([exponents, decades, curves])
    result.plots.extend([freq_plot, weak_plot])


def _visit_study(
    col: CollapseConfig, seed: int, pool: TrialExecutor, result: ExperimentResult
) -> None:
    cfg = make_canonical_config(col.visit_K)
    _, gt = _ground_truth(cfg, make_rng(seed, STREAM_VISITS), 1.0)
    X1 = Prompt(tuple(range(col.visit_K)))
    checkpoints = window_checkpoints(col.visit_T, col.visit_window)
    ensemble = _run_ensemble(
        pool,
        CcmcModel(gt),
        X1,
        col.visit_T,
        checkpoints,
        (STREAM_VISITS,),
        seed,
        col.visit_seeds,
    )
    table = ResultTable(
        "visits", ["seed", "token", "windows_grown", "windows", "status"]
    )
    all_grew = True
    for s, trajectory in zip(col.visit_seeds, ensemble, strict=True):
        grown = visit_growth_check(trajectory.stats, col.visit_window)
        for token in range(col.visit_K):
            ok = bool(grown[token].all())
            all_grew &= ok
            table.add_row(
                seed=s,
                token=token,
                windows_grown=int(grown[token].sum()),
                windows=int(grown.shape[1]),
                status=_status(ok),
            )
    result.tables.append(table)
    result.checks.append(
        CheckResult(
            "visits_grow_every_window",
            passed=all_grew,
            detail=f"K={col.visit_K}, T={col.visit_T}, window={col.visit_window}",
        )
    )


def _demo_study(col: CollapseConfig, seed: int, result: ExperimentResult) -> None:
    K = col.demo_K
    cfg = make_canonical_config(K)
    _, gt = _ground_truth(cfg, make_rng(seed, STREAM_DEMO), col.demo_gt_scale)
    zero_diagonal = gt.matrix.copy()
    np.fill_diagonal(zero_diagonal, 0.0)
    zero_diagonal /= zero_diagonal.sum(axis=0, keepdims=True)
    X1 = Prompt(tuple(col.start_prompt) if col.start_prompt else tuple(range(K)))
    table = ResultTable(
        "demo",
        ["chain", "token", "final_freq", "mle_column_tv", "mle_stop", "status"],
    )
    plot = PlotSpec(
        "collapse_demo", f"Token frequencies, K={K}", "t", "m_k(t)", xscale="log"
    )
    chains = (("positive", gt.matrix, False), ("zero_diagonal", zero_diagonal, True))
    for index, (chain, matrix, zeros) in enumerate(chains):
        P = TransitionMatrix(matrix)
        trajectory = generate_trajectory(
            CcmcModel(P),
            X1,
            col.demo_T,
            make_rng(seed, STREAM_DEMO, index),
            allow_zero_entries=zeros,
        )
        freqs = trajectory.stats.freq_series
        objective = trajectory_objective(
            trajectory.token_array, len(X1), K, X1.variant
        )
        try:
            W_hat, trace = gradient_descent(cfg, objective, col.optimizer.settings())
            estimate: TransitionMatrix | None = transition_from_weights(cfg, W_hat)
            stop = trace.stop_reason
        except StepSizeError as e:
            logger.warning("Trajectory MLE failed for the %s chain: %s", chain, e)
            estimate, stop = None, STATUS_OPTIMIZER
        for k in range(K):
            tv = math.nan if estimate is None else _tv(estimate.column(k), P.column(k))
            table.add_row(
                chain=chain,
                token=k,
                final_freq=float(freqs[-1, k]),
                mle_column_tv=tv,
                mle_stop=stop,
                status=STATUS_REPORT,
            )
        top = np.sort(freqs[-1])[::-1]
        logger.info(
            "Demo (%s): top token share %.3f, top two %.3f",
            chain,
            top[0],
            top[:2].sum(),
        )
        times = trajectory.stats.times.tolist()
        plot.series.extend(
            PlotSeries(f"{chain} token {k}", times, freqs[:, k].tolist())
            for k in range(K)
        )
    result.tables.append(table)
    result.plots.append(plot)


def run_collapse(
    spec: ExperimentSpec, executor: TrialExecutor | None = None
) -> ExperimentResult:
    """Weak-token collapse, weak-transition growth, visit growth and the demo run."""
    spec.require_valid()
    col = spec.config.collapse
    seed = spec.master_seed
    pool = _executor(spec, executor)
    logger.info(
        "Collapse: p grid %s, ensemble %d, T=%d", col.p_grid, col.ensemble, col.T
    )
    result = ExperimentResult(ExperimentKind.COLLAPSE.value, metadata=_metadata(spec))
    _weak_token_study(col, seed, pool, result)
    _visit_study(col, seed, pool, result)
    _demo_study(col, seed, result)
    logger.info("Collapse finished: %s", _verdict(result))
    return result


DRIVERS: dict[ExperimentKind, Driver] = {
    ExperimentKind.EQUIVALENCE: run_equivalence,
    ExperimentKind.CONSISTENCY: run_consistency,
    ExperimentKind.COMPLEXITY: run_complexity,
    ExperimentKind.COLLAPSE: run_collapse,
    ExperimentKind.POSITIONAL: run_positional,
}
