"""Tests for the shared data model."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ccmc_lab.core import (
    AttnVariant,
    Dataset,
    Prompt,
    PromptDistribution,
    TransitionMatrix,
    ValidationError,
    cyclic_shift_distribution,
    frequency_vector,
    inverse_cdf,
    make_rng,
    random_prompt_distribution,
    sample_categorical,
    validate_transition_matrix,
)


class TestPrompt:
    """Tests for Prompt."""

    def test_parse_whitespace_separated_tokens(self) -> None:
        """Test that parse reads 0-based ids."""
        prompt = Prompt.parse("0 1 0")
        assert prompt.tokens == (0, 1, 0)
        assert prompt.last == 0
        assert str(prompt) == "0 1 0"

    def test_parse_rejects_non_integers(self) -> None:
        """Test that a malformed prompt raises ValidationError."""
        with pytest.raises(ValidationError, match="Malformed prompt"):
            Prompt.parse("0 x 1")

    def test_cross_prompt_needs_two_tokens(self) -> None:
        """Test that a length-1 cross-attention prompt is rejected."""
        with pytest.raises(ValidationError, match="at least 2"):
            Prompt((0,), AttnVariant.CROSS)

    def test_keys_exclude_query_for_cross(self) -> None:
        """Test that cross-attention keys drop the last token."""
        assert Prompt((1, 2, 0), AttnVariant.CROSS).keys == (1, 2)
        assert Prompt((1, 2, 0)).keys == (1, 2, 0)

    def test_validate_rejects_out_of_vocabulary(self) -> None:
        """Test that a token outside [0, K) names its position."""
        with pytest.raises(ValidationError, match="position 1"):
            Prompt((0, 3)).validate(3)


class TestFrequencyVector:
    """Tests for frequency_vector."""

    def test_self_attention_counts_every_position(self) -> None:
        """Test m for the prompt 0 1 0 over K=3."""
        m = frequency_vector(Prompt((0, 1, 0)), 3)
        np.testing.assert_allclose(m.weights, [2 / 3, 1 / 3, 0.0])
        assert m.length == 3

    def test_each_token_once_is_uniform(self) -> None:
        """Test that a permutation of the vocabulary gives uniform weights."""
        m = frequency_vector(Prompt((0, 1, 2, 3)), 4)
        np.testing.assert_allclose(m.weights, [0.25] * 4)

    def test_cross_attention_excludes_query(self) -> None:
        """Test m for the cross prompt 1 2 0 over K=3."""
        m = frequency_vector(Prompt((1, 2, 0), AttnVariant.CROSS), 3)
        np.testing.assert_allclose(m.weights, [0.0, 0.5, 0.5])
        assert m.length == 2

    def test_invalid_token_raises(self) -> None:
        """Test that an out-of-vocabulary token is rejected."""
        with pytest.raises(ValidationError):
            frequency_vector(Prompt((0, 5)), 3)


class TestTransitionMatrix:
    """Tests for TransitionMatrix and validate_transition_matrix."""

    def test_uniform_is_valid_and_positive(self) -> None:
        """Test the uniform K=3 matrix."""
        report = validate_transition_matrix(TransitionMatrix.uniform(3))
        assert report.valid
        assert report.strictly_positive

    def test_column_sum_deviation_is_reported(self) -> None:
        """Test that a column summing to 1.1 is invalid."""
        P = TransitionMatrix.from_columns([[0.5, 0.6], [0.5, 0.5]])
        report = validate_transition_matrix(P)
        assert not report.valid
        assert "Column 0" in report.errors[0]
        assert report.column_sum_deviation[0] == pytest.approx(0.1)

    def test_zero_entry_is_valid_but_not_positive(self) -> None:
        """Test a column [1, 0]."""
        P = TransitionMatrix.from_columns([[1.0, 0.0], [0.5, 0.5]])
        report = validate_transition_matrix(P)
        assert report.valid
        assert not report.strictly_positive
        assert not P.is_strictly_positive

    def test_negative_entry_is_invalid(self) -> None:
        """Test that a negative entry is reported."""
        P = TransitionMatrix.from_columns([[1.5, -0.5], [0.5, 0.5]])
        assert any("Negative" in e for e in validate_transition_matrix(P).errors)

    def test_rejects_non_square(self) -> None:
        """Test that a 2×3 matrix cannot be constructed."""
        with pytest.raises(ValidationError, match="square"):
            TransitionMatrix(np.ones((2, 3)) / 2)

    def test_column_is_next_state_distribution(self) -> None:
        """Test that column i is pi_i."""
        P = TransitionMatrix.from_columns([[0.2, 0.8], [0.6, 0.4]])
        np.testing.assert_allclose(P.column(1), [0.6, 0.4])

    def test_csv_preserves_values(
        self, tmp_path: Path, positive_chain: TransitionMatrix
    ) -> None:
        """Test that to_csv/from_csv keeps every float exactly."""
        path = tmp_path / "P.csv"
        positive_chain.to_csv(path)
        assert path.read_text().splitlines()[0] == "k0,k1,k2"
        np.testing.assert_array_equal(
            TransitionMatrix.from_csv(path).matrix, positive_chain.matrix
        )


class TestSampleCategorical:
    """Tests for sample_categorical."""

    def test_one_hot_is_deterministic(self, rng: np.random.Generator) -> None:
        """Test that [1, 0, 0] always gives token 0."""
        assert {sample_categorical([1.0, 0.0, 0.0], rng) for _ in range(100)} == {0}

    def test_zero_weight_is_never_drawn(self, rng: np.random.Generator) -> None:
        """Test that a zero-probability token never appears."""
        draws = {sample_categorical([0.5, 0.0, 0.5], rng) for _ in range(1000)}
        assert 1 not in draws

    def test_fair_coin_frequency(self) -> None:
        """Test 10^6 draws of [0.5, 0.5] against binomial concentration."""
        rng = make_rng(7)
        u = rng.random(1_000_000)
        draws = inverse_cdf(np.broadcast_to([0.5, 0.5], (u.size, 2)), u)
        assert abs(np.mean(draws == 0) - 0.5) < 0.002

    def test_same_seed_same_sequence(self) -> None:
        """Test that a fixed seed reproduces the draw sequence."""
        rng_a, rng_b = make_rng(5, 1), make_rng(5, 1)
        seq_a = [sample_categorical([0.3, 0.7], rng_a) for _ in range(50)]
        seq_b = [sample_categorical([0.3, 0.7], rng_b) for _ in range(50)]
        assert seq_a == seq_b

    def test_rejects_bad_distribution(self, rng: np.random.Generator) -> None:
        """Test negative entries and wrong sums."""
        with pytest.raises(ValidationError, match="negative"):
            sample_categorical([1.2, -0.2], rng)
        with pytest.raises(ValidationError, match="sums to"):
            sample_categorical([0.5, 0.6], rng)


class TestMakeRng:
    """Tests for make_rng."""

    def test_streams_differ_by_trial_key(self) -> None:
        """Test that distinct trial keys give distinct streams."""
        assert make_rng(0, 1).random() != make_rng(0, 2).random()

    def test_stream_is_reproducible(self) -> None:
        """Test that the same key gives the same stream."""
        first, second = make_rng(3, 4, 5), make_rng(3, 4, 5)
        np.testing.assert_array_equal(first.random(8), second.random(8))


class TestPromptDistribution:
    """Tests for PromptDistribution and its builders."""

    def test_rejects_weights_not_summing_to_one(self) -> None:
        """Test weight validation."""
        with pytest.raises(ValidationError, match="sum to"):
            PromptDistribution(((Prompt((0, 1)), 0.4),), 2)

    def test_rejects_mixed_variants(self) -> None:
        """Test that self and cross prompts cannot share a support."""
        support = (
            (Prompt((0, 1)), 0.5),
            (Prompt((1, 0), AttnVariant.CROSS), 0.5),
        )
        with pytest.raises(ValidationError, match="variant"):
            PromptDistribution(support, 2)

    def test_rejects_duplicates(self) -> None:
        """Test that a prompt may appear once."""
        with pytest.raises(ValidationError, match="Duplicate"):
            PromptDistribution.uniform([Prompt((0, 1)), Prompt((0, 1))], 2)

    def test_cyclic_shift_support(self) -> None:
        """Test the K*K cyclic-shift prompts."""
        dist = cyclic_shift_distribution(3, AttnVariant.CROSS)
        assert len(dist.prompts) == 9
        assert dist.variant is AttnVariant.CROSS
        assert all(sorted(p.keys) == [0, 1, 2] for p in dist.prompts)
        assert dist.weights.sum() == pytest.approx(1.0)

    def test_random_support_merges_duplicates(self, rng: np.random.Generator) -> None:
        """Test that duplicate draws collapse into one support entry."""
        dist = random_prompt_distribution(2, 50, 1, rng)
        assert len(dist.prompts) <= 2

    def test_sample_draws_from_support(self, rng: np.random.Generator) -> None:
        """Test that samples come from the support."""
        dist = cyclic_shift_distribution(3)
        support = {p.tokens for p in dist.prompts}
        assert all(p.tokens in support for p in dist.sample(100, rng))


class TestDataset:
    """Tests for Dataset."""

    def test_unsupported_samples(self) -> None:
        """Test that labels absent from the keys are listed."""
        data = Dataset(((Prompt((0, 1)), 1), (Prompt((0, 0)), 1)), 3)
        assert data.unsupported_samples() == [1]

    def test_rejects_out_of_vocabulary_label(self) -> None:
        """Test label validation."""
        with pytest.raises(ValidationError, match="sample 0"):
            Dataset(((Prompt((0, 1)), 3),), 3)

    def test_csv_round_trip(self, tmp_path: Path) -> None:
        """Test that from_csv reads what to_csv wrote."""
        data = Dataset(((Prompt((0, 1, 2)), 1), (Prompt((2, 2)), 2)), 3)
        path = tmp_path / "data.csv"
        data.to_csv(path)
        assert path.read_text().splitlines() == ["prompt,next", "0 1 2,1", "2 2,2"]
        assert Dataset.from_csv(path, 3) == data
