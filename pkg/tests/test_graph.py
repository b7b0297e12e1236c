"""Tests for co-occurrence graphs and consistency prediction."""

from __future__ import annotations

import numpy as np
import pytest

from ccmc_lab.core import (
    AttnVariant,
    Prompt,
    PromptDistribution,
    TransitionMatrix,
    cyclic_shift_distribution,
    make_rng,
    random_prompt_distribution,
)
from ccmc_lab.graph import (
    CooccurrenceGraph,
    build_cooccurrence_graphs,
    connected_components,
    is_connected_wrt,
    predict_consistency,
)


def _graph(K: int, edges: list[tuple[int, int]]) -> CooccurrenceGraph:
    adjacency = np.zeros((K, K), dtype=bool)
    for i, j in edges:
        adjacency[i, j] = adjacency[j, i] = True
    appears = np.ones(K, dtype=bool)
    return CooccurrenceGraph(query_token=0, adjacency=adjacency, appears=appears)


class TestBuildCooccurrenceGraphs:
    """Tests for build_cooccurrence_graphs."""

    def test_self_attention_links_query(self) -> None:
        """Test that self-attention keys include the query token."""
        dist = PromptDistribution.uniform([Prompt((1, 2, 0)), Prompt((3, 4, 0))], 5)
        g = build_cooccurrence_graphs(dist)[0]
        assert g.edges() == [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (3, 4)]
        assert connected_components(g) == [[0, 1, 2, 3, 4]]

    def test_cross_attention_splits(self) -> None:
        """Test that the same prompts under cross-attention split into three parts."""
        prompts = [
            Prompt((1, 2, 0), AttnVariant.CROSS),
            Prompt((3, 4, 0), AttnVariant.CROSS),
        ]
        dist = PromptDistribution.uniform(prompts, 5)
        g = build_cooccurrence_graphs(dist)[0]
        assert g.edges() == [(1, 2), (3, 4)]
        assert connected_components(g) == [[0], [1, 2], [3, 4]]
        assert not g.appears[0]

    def test_empty_omega_is_edgeless(self) -> None:
        """Test that a query token with no prompts has K singletons."""
        dist = PromptDistribution.uniform([Prompt((1, 2, 0))], 3)
        g = build_cooccurrence_graphs(dist)[1]
        assert g.edges() == []
        assert connected_components(g) == [[0], [1], [2]]

    def test_zero_weight_prompts_are_skipped(self) -> None:
        """Test that support entries with weight 0 add no edges."""
        dist = PromptDistribution(((Prompt((1, 0)), 1.0), (Prompt((2, 0)), 0.0)), 3)
        assert build_cooccurrence_graphs(dist)[0].edges() == [(0, 1)]


class TestConnectedComponents:
    """Tests for connected_components."""

    def test_complete_graph(self) -> None:
        """Test that a complete graph is one component."""
        edges = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        assert connected_components(_graph(4, edges)) == [[0, 1, 2, 3]]

    def test_edgeless_graph(self) -> None:
        """Test that three isolated vertices are three singletons."""
        assert connected_components(_graph(3, [])) == [[0], [1], [2]]

    def test_path_with_isolated_vertex(self) -> None:
        """Test the path 0-1-2 plus the isolated vertex 3."""
        assert connected_components(_graph(4, [(0, 1), (1, 2)])) == [[0, 1, 2], [3]]


class TestIsConnectedWrt:
    """Tests for is_connected_wrt."""

    def test_all_nonzero_is_plain_connectivity(self) -> None:
        """Test that a strictly positive column reduces to connectivity."""
        g = _graph(3, [(0, 1)])
        assert not is_connected_wrt(g, [0.2, 0.3, 0.5])
        assert is_connected_wrt(_graph(3, [(0, 1), (1, 2)]), [0.2, 0.3, 0.5])

    def test_single_nonzero_vertex_is_vacuous(self) -> None:
        """Test that one nonzero vertex is always connected."""
        assert is_connected_wrt(_graph(3, []), [0.0, 1.0, 0.0])

    def test_path_through_zero_vertices_does_not_count(self) -> None:
        """Test K=5 with nonzero {1, 4} joined only through zero vertices 2, 3."""
        g = _graph(5, [(1, 2), (2, 3), (3, 4)])
        assert connected_components(g) == [[0], [1, 2, 3, 4]]
        assert not is_connected_wrt(g, [0.0, 0.5, 0.0, 0.0, 0.5])

    def test_zero_vertices_may_be_isolated(self) -> None:
        """Test that tokens the column never emits need no edges."""
        g = _graph(4, [(0, 1)])
        assert is_connected_wrt(g, [0.5, 0.5, 0.0, 0.0])


class TestPredictConsistency:
    """Tests for predict_consistency."""

    def test_self_attention_shortcut_agrees(self) -> None:
        """Test that the cyclic self-attention support is consistent."""
        verdict = predict_consistency(cyclic_shift_distribution(4))
        assert verdict.consistent
        assert all(v.shortcut_connected for v in verdict.per_query)

    def test_cross_attention_split_is_inconsistent(self) -> None:
        """Test that disjoint key pairs make every query disconnected."""
        prompts = [
            Prompt((a, b, q), AttnVariant.CROSS)
            for q in range(4)
            for a, b in ((0, 1), (2, 3))
        ]
        verdict = predict_consistency(PromptDistribution.uniform(prompts, 4))
        assert not verdict.consistent
        assert all(len(v.components) == 2 for v in verdict.per_query)
        assert all(v.shortcut_connected is None for v in verdict.per_query)

    def test_ground_truth_zeros_flip_the_verdict(self) -> None:
        """Test that a gt emitting only one component's tokens restores consistency."""
        prompts = [
            Prompt((a, b, q), AttnVariant.CROSS)
            for q in range(4)
            for a, b in ((0, 1), (2, 3))
        ]
        dist = PromptDistribution.uniform(prompts, 4)
        gt = TransitionMatrix.from_columns([[0.5, 0.5, 0.0, 0.0]] * 4)
        assert not predict_consistency(dist).consistent
        verdict = predict_consistency(dist, gt)
        assert verdict.consistent
        assert all(v.connected_wrt_gt for v in verdict.per_query)

    def test_to_json(self) -> None:
        """Test the serialized verdict."""
        data = predict_consistency(cyclic_shift_distribution(3)).to_json()
        assert data["consistent"] is True
        assert data["per_query"][0]["components"] == [[0, 1, 2]]


class TestSupportProperties:
    """Tests for verdict properties over randomized supports."""

    @pytest.mark.parametrize("seed", range(20))
    def test_adding_a_prompt_only_adds_edges(self, seed: int) -> None:
        """Test that a larger support keeps every edge and never splits a graph."""
        rng = make_rng(seed, 0)
        K = int(rng.integers(3, 7))
        dist = random_prompt_distribution(K, 4, 3, rng, AttnVariant.CROSS)
        extra = Prompt(tuple(int(t) for t in rng.integers(0, K, 3)), AttnVariant.CROSS)
        larger = PromptDistribution.uniform(dict.fromkeys([*dist.prompts, extra]), K)
        before = build_cooccurrence_graphs(dist)
        after = build_cooccurrence_graphs(larger)
        for small, big in zip(before, after, strict=True):
            assert set(small.edges()) <= set(big.edges())
            assert len(connected_components(big)) <= len(connected_components(small))
        was = predict_consistency(dist).consistent
        assert predict_consistency(larger).consistent or not was

    @pytest.mark.parametrize("seed", range(50))
    def test_shortcut_matches_components_on_random_supports(self, seed: int) -> None:
        """Test that every-token-appears agrees with connectivity for self-attention."""
        rng = make_rng(seed, 1)
        K = int(rng.integers(2, 7))
        n_prompts = int(rng.integers(1, 9))
        length = int(rng.integers(1, 5))
        verdict = predict_consistency(
            random_prompt_distribution(K, n_prompts, length, rng)
        )
        for v in verdict.per_query:
            assert v.shortcut_connected == v.connected

    @pytest.mark.parametrize("seed", range(10))
    def test_verdict_ignores_support_order(self, seed: int) -> None:
        """Test that reversing the support leaves the verdict unchanged."""
        rng = make_rng(seed, 2)
        dist = random_prompt_distribution(5, 6, 3, rng, AttnVariant.CROSS)
        reordered = PromptDistribution(tuple(reversed(dist.support)), dist.K)
        assert predict_consistency(reordered).to_json() == (
            predict_consistency(dist).to_json()
        )
