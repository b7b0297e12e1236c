"""Co-occurrence graphs and the connectivity criteria for consistent estimation.

For each query token k, G^(k) has the vocabulary as vertices and an edge
between i and j whenever both appear among the keys of one prompt of the
support that ends in k. The population MLE recovers the ground truth iff
every G^(k) is connected (or, when the ground truth has zero entries,
connected through the tokens it can actually emit).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components

from .core import (
    ZERO_PROB,
    AttnVariant,
    PromptDistribution,
    TransitionMatrix,
    ValidationError,
    validate_transition_matrix,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CooccurrenceGraph:
    """G^(k) for query token k.

    Attributes:
        query_token: k.
        adjacency: K×K symmetric boolean matrix, no self loops.
        appears: Which tokens occur among the keys of some prompt in Omega_k.
    """

    query_token: int
    adjacency: NDArray[np.bool_]
    appears: NDArray[np.bool_]

    @property
    def K(self) -> int:
        return int(self.adjacency.shape[0])

    def edges(self) -> list[tuple[int, int]]:
        """Edges (i, j) with i < j in lexicographic order."""
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(i), int(j)) for i, j in zip(rows, cols, strict=True)]


@dataclass(frozen=True)
class QueryVerdict:
    """Connectivity findings for one query token."""

    query_token: int
    connected: bool
    components: list[list[int]]
    connected_wrt_gt: bool | None = None
    shortcut_connected: bool | None = None


@dataclass(frozen=True)
class ConsistencyVerdict:
    """Per-query connectivity and the overall consistency prediction."""

    per_query: list[QueryVerdict] = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        """All G^(k) connected, or connected w.r.t. the ground truth if given."""
        return all(
            v.connected if v.connected_wrt_gt is None else v.connected_wrt_gt
            for v in self.per_query
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "consistent": self.consistent,
            "per_query": [
                {
                    "query_token": v.query_token,
                    "connected": v.connected,
                    "connected_wrt_gt": v.connected_wrt_gt,
                    "shortcut_connected": v.shortcut_connected,
                    "components": v.components,
                }
                for v in self.per_query
            ],
        }


def build_cooccurrence_graphs(dist: PromptDistribution) -> list[CooccurrenceGraph]:
    """Build G^(k) for every k from the support of ``dist``.

    Prompts with weight exactly zero are skipped. Key tokens are all tokens
    for self-attention and all but the last for cross-attention.
    """
    K = dist.K
    adjacency = np.zeros((K, K, K), dtype=bool)
    appears = np.zeros((K, K), dtype=bool)
    for prompt, weight in dist.support:
        if weight == 0.0:
            continue
        k = prompt.last
        keys = np.unique(np.asarray(prompt.keys, dtype=np.int64))
        appears[k, keys] = True
        adjacency[k][np.ix_(keys, keys)] = True
    graphs = []
    for k in range(K):
        adj = adjacency[k]
        np.fill_diagonal(adj, False)
        graphs.append(
            CooccurrenceGraph(query_token=k, adjacency=adj, appears=appears[k])
        )
    return graphs


def _components(adjacency: NDArray[np.bool_]) -> list[list[int]]:
    n = adjacency.shape[0]
    if n == 0:
        return []
    _, labels = _csgraph_components(csr_matrix(adjacency), directed=False)
    groups: dict[int, list[int]] = {}
    for vertex, label in enumerate(labels):
        groups.setdefault(int(label), []).append(vertex)
    return sorted(groups.values(), key=lambda c: c[0])


def connected_components(g: CooccurrenceGraph) -> list[list[int]]:
    """Partition of [K] into components, ordered by smallest vertex."""
    return _components(g.adjacency)


def is_connected_wrt(g: CooccurrenceGraph, gt_column: ArrayLike) -> bool:
    """Connectivity among, and through, tokens with nonzero ground-truth mass.

    Every pair of nonzero-probability vertices must be joined by a path whose
    vertices all have nonzero probability.
    """
    column = np.asarray(gt_column, dtype=np.float64)
    if column.shape != (g.K,):
        raise ValidationError(f"Expected a {g.K}-vector, got shape {column.shape}")
    support = np.flatnonzero(column > ZERO_PROB)
    if support.size <= 1:
        return True
    return len(_components(g.adjacency[np.ix_(support, support)])) == 1


def predict_consistency(
    dist: PromptDistribution, gt: TransitionMatrix | None = None
) -> ConsistencyVerdict:
    """Decide consistency of the population MLE from the support alone.

    For self-attention supports the shortcut (every token appears in some
    prompt of Omega_k) is evaluated as a cross-check and recorded.
    """
    if gt is not None:
        report = validate_transition_matrix(gt)
        if not report.valid:
            raise ValidationError("; ".join(report.errors))
        if gt.K != dist.K:
            raise ValidationError(
                f"gt is {gt.K}×{gt.K} but the support uses K={dist.K}"
            )
    verdicts = []
    for g in build_cooccurrence_graphs(dist):
        components = connected_components(g)
        connected = len(components) == 1
        shortcut: bool | None = None
        if dist.variant is AttnVariant.SELF:
            shortcut = bool(g.appears.all())
            if shortcut != connected:
                logger.warning(
                    "Shortcut and BFS disagree for query %d: %s vs %s",
                    g.query_token,
                    shortcut,
                    connected,
                )
        verdicts.append(
            QueryVerdict(
                query_token=g.query_token,
                connected=connected,
                components=components,
                connected_wrt_gt=(
                    None
                    if gt is None
                    else is_connected_wrt(g, gt.column(g.query_token))
                ),
                shortcut_connected=shortcut,
            )
        )
    verdict = ConsistencyVerdict(per_query=verdicts)
    logger.debug("Consistency verdict: %s", verdict.consistent)
    return verdict
