"""Shared pytest fixtures for ccmc-lab tests."""

from __future__ import annotations

import numpy as np
import pytest

from ccmc_lab.attention import EmbeddingConfig, make_canonical_config
from ccmc_lab.config import LabConfig
from ccmc_lab.core import TransitionMatrix, make_rng


@pytest.fixture
def rng() -> np.random.Generator:
    """Create a fixed-seed generator for one test."""
    return make_rng(1234, 0)


@pytest.fixture
def canonical3() -> EmbeddingConfig:
    """Create the exact weight-tied config for K=3 (E = C = I)."""
    return make_canonical_config(3)


@pytest.fixture
def general3(rng: np.random.Generator) -> EmbeddingConfig:
    """Create a random rank-3 config in dimension 5 with the tied classifier.

    Returns:
        EmbeddingConfig satisfying C E^T = I with non-orthonormal rows.
    """
    E = rng.standard_normal((3, 5))
    return EmbeddingConfig(E=E, C=np.linalg.solve(E @ E.T, E))


@pytest.fixture
def positive_chain(rng: np.random.Generator) -> TransitionMatrix:
    """Create a random strictly positive 3×3 column-stochastic matrix."""
    return TransitionMatrix(rng.dirichlet(np.ones(3), size=3).T)


@pytest.fixture
def smoke_config() -> LabConfig:
    """Create a configuration small enough to run every driver in seconds.

    Returns:
        LabConfig with shrunken grids and loosened statistical tolerances.
    """
    config = LabConfig(threads=2)
    eq = config.equivalence
    eq.K_grid = [2, 3]
    eq.n_weights = 3
    eq.n_prompts = 5
    eq.roundtrip_K_grid = [2, 3]
    eq.n_roundtrip = 3
    eq.n_nullspace = 8

    cons = config.consistency
    cons.n_ground_truths = 1
    cons.n_convexity_probes = 20
    cons.n_gradient_checks = 3
    cons.n_kl_checks = 3

    comp = config.complexity
    comp.K = 3
    comp.n_grid = [128, 512, 2048]
    comp.seeds = [0, 1, 2]
    comp.slope_min = -3.0
    comp.slope_max = 0.0

    col = config.collapse
    col.p_grid = [0.25, 0.5]
    col.ensemble = 4
    col.T = 2000
    col.exponent_tol = 10.0
    col.symmetric_tol = 10.0
    col.decades = [100, 1000]
    col.visit_T = 4000
    col.visit_window = 1000
    col.visit_seeds = [0, 1]
    col.demo_T = 50

    config.positional.n_trials = 4
    return config
