"""Tests for CCMC transition laws."""

from __future__ import annotations

import numpy as np
import pytest

from ccmc_lab.ccmc import (
    CcmcModel,
    DegenerateMaskError,
    PositionalCcmcModel,
    ccmc_next_distribution,
    ccmc_sample_next,
    masked_transition,
    positional_next_distribution,
)
from ccmc_lab.core import (
    AttnVariant,
    Prompt,
    TransitionMatrix,
    ValidationError,
    make_rng,
)


class TestMaskedTransition:
    """Tests for masked_transition."""

    def test_uniform_chain_returns_mask(self) -> None:
        """Test that a uniform base chain reduces to frequency weighting."""
        m = np.array([0.5, 0.25, 0.25])
        out = masked_transition(TransitionMatrix.uniform(3), m, 1)
        np.testing.assert_allclose(out, m)

    def test_one_hot_mask(self) -> None:
        """Test that a one-hot mask gives a one-hot output."""
        P = TransitionMatrix.from_columns([[0.2, 0.3, 0.5]] * 3)
        np.testing.assert_allclose(masked_transition(P, [0.0, 1.0, 0.0], 2), [0, 1, 0])

    def test_hand_computed_example(self) -> None:
        """Test pi = [0.5, 0.3, 0.2], m = [2/3, 1/3, 0] -> [10/13, 3/13, 0]."""
        P = TransitionMatrix.from_columns([[0.5, 0.3, 0.2]] * 3)
        out = masked_transition(P, [2 / 3, 1 / 3, 0.0], 0)
        np.testing.assert_allclose(out, [10 / 13, 3 / 13, 0.0], atol=1e-15)

    def test_annihilated_column_raises(self) -> None:
        """Test that m^T pi = 0 is a degenerate mask."""
        P = TransitionMatrix.from_columns([[1.0, 0.0], [0.5, 0.5]])
        with pytest.raises(DegenerateMaskError, match="column 0"):
            masked_transition(P, [0.0, 1.0], 0)


class TestCcmcNextDistribution:
    """Tests for ccmc_next_distribution."""

    def test_self_prompt_with_uniform_chain(self) -> None:
        """Test the prompt 0 1 0 over a uniform K=3 chain."""
        model = CcmcModel(TransitionMatrix.uniform(3))
        out = ccmc_next_distribution(model, Prompt((0, 1, 0)))
        np.testing.assert_allclose(out, [2 / 3, 1 / 3, 0.0])

    def test_cross_prompt_masks_query(self) -> None:
        """Test that the query token gets zero mass under cross-attention."""
        model = CcmcModel(TransitionMatrix.uniform(3))
        out = ccmc_next_distribution(model, Prompt((1, 2, 0), AttnVariant.CROSS))
        np.testing.assert_allclose(out, [0.0, 0.5, 0.5])

    def test_permutation_prompt_returns_column(
        self, positive_chain: TransitionMatrix
    ) -> None:
        """Test that each token once reproduces column pi_{x_L}."""
        model = CcmcModel(positive_chain)
        out = ccmc_next_distribution(model, Prompt((2, 0, 1)))
        np.testing.assert_allclose(out, positive_chain.column(1), atol=1e-15)

    def test_repeated_token_is_absorbing(
        self, positive_chain: TransitionMatrix
    ) -> None:
        """Test that a single repeated token predicts itself."""
        out = ccmc_next_distribution(CcmcModel(positive_chain), Prompt((1, 1, 1)))
        np.testing.assert_allclose(out, [0.0, 1.0, 0.0])


class TestCcmcSampleNext:
    """Tests for ccmc_sample_next."""

    def test_deterministic_when_one_hot(self, rng: np.random.Generator) -> None:
        """Test that a one-hot law always samples its token."""
        model = CcmcModel(TransitionMatrix.uniform(2))
        assert {ccmc_sample_next(model, Prompt((1, 1)), rng) for _ in range(20)} == {1}

    def test_uniform_split(self) -> None:
        """Test 10^5 draws of the K=2 uniform chain stay within 0.01."""
        model = CcmcModel(TransitionMatrix.uniform(2))
        rng = make_rng(11)
        draws = [ccmc_sample_next(model, Prompt((0, 1)), rng) for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.5) < 0.01

    def test_fixed_seed_is_reproducible(self, positive_chain: TransitionMatrix) -> None:
        """Test identical sequences for identical seeds."""
        model = CcmcModel(positive_chain)
        prompt = Prompt((0, 1, 2))
        rng_a, rng_b = make_rng(9), make_rng(9)
        first = [ccmc_sample_next(model, prompt, rng_a) for _ in range(30)]
        second = [ccmc_sample_next(model, prompt, rng_b) for _ in range(30)]
        assert first == second


class TestPositional:
    """Tests for PositionalCcmcModel and positional_next_distribution."""

    def test_unit_factors_reduce_to_plain(
        self, positive_chain: TransitionMatrix
    ) -> None:
        """Test that a, b, V = 1 reproduces the plain CCMC."""
        prompt = Prompt((0, 2, 2, 1))
        plain = PositionalCcmcModel.plain(positive_chain, 4)
        np.testing.assert_allclose(
            positional_next_distribution(plain, prompt),
            ccmc_next_distribution(CcmcModel(positive_chain), prompt),
            atol=1e-15,
        )

    def test_absent_token_gets_zero(self, rng: np.random.Generator) -> None:
        """Test that a token missing from the prompt has zero mass."""
        P = TransitionMatrix(rng.dirichlet(np.ones(3), size=3).T)
        model = PositionalCcmcModel(
            P,
            rng.uniform(0.5, 2, 4),
            rng.uniform(0.5, 2, 3),
            rng.uniform(0.5, 2, (4, 3)),
        )
        assert positional_next_distribution(model, Prompt((0, 0, 1, 1)))[2] == 0.0

    def test_matches_direct_summation(self, rng: np.random.Generator) -> None:
        """Test against a term-by-term evaluation for K=3, L=4."""
        K, L = 3, 4
        P = TransitionMatrix(rng.dirichlet(np.ones(K), size=K).T)
        a = rng.uniform(0.1, 3, L)
        b = rng.uniform(0.1, 3, K)
        V = rng.uniform(0.1, 3, (L, K))
        model = PositionalCcmcModel(P, a, b, V)
        for variant in AttnVariant:
            tokens = tuple(int(t) for t in rng.integers(0, K, size=L))
            prompt = Prompt(tokens, variant)
            q = tokens[-1]
            n_keys = L if variant is AttnVariant.SELF else L - 1
            direct = np.zeros(K)
            for j in range(K):
                mass = sum(a[i] * V[i, q] for i in range(n_keys) if tokens[i] == j)
                direct[j] = b[j] * P.matrix[j, q] * mass
            direct /= direct.sum()
            np.testing.assert_allclose(
                positional_next_distribution(model, prompt), direct, atol=1e-12
            )

    def test_length_mismatch_raises(self, positive_chain: TransitionMatrix) -> None:
        """Test that prompts must have length L."""
        with pytest.raises(ValidationError, match="length 4"):
            positional_next_distribution(
                PositionalCcmcModel.plain(positive_chain, 4), Prompt((0, 1))
            )

    def test_rejects_non_positive_factors(
        self, positive_chain: TransitionMatrix
    ) -> None:
        """Test that factors must be strictly positive."""
        with pytest.raises(ValidationError, match="strictly positive"):
            PositionalCcmcModel(
                positive_chain, np.zeros(2), np.ones(3), np.ones((2, 3))
            )
