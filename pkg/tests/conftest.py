"""Shared fixtures. Expensive solves are session scoped and reused."""
import numpy as np
import pytest

from mfglab.grids import StateGrid, TimeGrid
from mfglab.lab.config import ExperimentConfig
from mfglab.lab.experiments import build_scenarios, solve_equilibrium
from mfglab.model import builtin_model


@pytest.fixture(scope="session")
def default_config():
    return ExperimentConfig.default()


@pytest.fixture(scope="session")
def lq_spec(default_config):
    return default_config.model()


@pytest.fixture(scope="session")
def lq_scenarios(default_config, lq_spec):
    return build_scenarios(default_config, lq_spec)


@pytest.fixture(scope="session")
def lq_solution(default_config, lq_spec, lq_scenarios):
    """The default lq_monotone equilibrium: 8 scenarios, 61 bins, N_t = 25."""
    return solve_equilibrium(default_config, lq_spec, lq_scenarios)


@pytest.fixture(scope="session")
def small_lq():
    """A coarse lq_monotone instance for fast solver tests."""
    spec = builtin_model("lq_monotone", {"n_actions": 41})
    return spec, TimeGrid(spec.horizon, 10), StateGrid.centered([0.5], [7.5], 31)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
