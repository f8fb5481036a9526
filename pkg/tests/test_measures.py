import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfglab.exceptions import DomainError
from mfglab.grids import StateGrid, TimeGrid
from mfglab.measures import (MeasureFlow, MeasureSummary, SelfInsertedMeasure, flow_distance, moment,
                             wasserstein)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
atoms = arrays(np.float64, st.integers(1, 12), elements=finite)


def test_w1_between_diracs():
    assert wasserstein(MeasureSummary.dirac([0.0]), MeasureSummary.dirac([1.0]), 1) == pytest.approx(1.0)


def test_w2_sorted_coupling():
    assert wasserstein(MeasureSummary([0.0, 2.0]), MeasureSummary([1.0, 3.0]), 2) == pytest.approx(1.0)


@pytest.mark.parametrize("r", [0.0, 0.5, 1.0, 2.0, 3.0])
def test_distance_to_itself_is_zero(r):
    mu = MeasureSummary([0.1, -2.0, 3.5], [0.2, 0.3, 0.5])
    assert wasserstein(mu, mu, r) == pytest.approx(0.0, abs=1e-12)


def test_moment_examples():
    assert moment(MeasureSummary.dirac([0.0]), 2) == 0.0
    assert moment(MeasureSummary([-1.0, 1.0]), 2) == pytest.approx(1.0)
    assert moment(MeasureSummary([0.0, 2.0]), 1) == pytest.approx(1.0)


def test_flow_distance_examples():
    grid = TimeGrid(1.0, 4)
    zero = MeasureFlow.constant(grid, MeasureSummary.dirac([0.0]))
    assert flow_distance(zero, zero) == 0.0
    shifted = MeasureFlow(grid, zero.measures[:-1] + (MeasureSummary.dirac([0.5]),))
    assert flow_distance(zero, shifted) == pytest.approx(0.5)
    assert flow_distance(zero, MeasureFlow.constant(grid, MeasureSummary.dirac([1.7])), 1) == pytest.approx(1.7)


def test_flow_distance_needs_same_grid():
    a = MeasureFlow.constant(TimeGrid(1.0, 4), MeasureSummary.dirac([0.0]))
    b = MeasureFlow.constant(TimeGrid(1.0, 5), MeasureSummary.dirac([0.0]))
    with pytest.raises(DomainError):
        flow_distance(a, b)


def test_empty_and_invalid_measures():
    with pytest.raises(DomainError):
        MeasureSummary(np.zeros((0, 1)))
    with pytest.raises(DomainError):
        MeasureSummary([0.0, 1.0], [0.7, 0.7])
    with pytest.raises(DomainError):
        MeasureSummary([0.0, 1.0], [1.5, -0.5])
    with pytest.raises(DomainError):
        wasserstein(MeasureSummary([0.0]), MeasureSummary([0.0]), -1)


def test_truncated_cost_lp_matches_small_problem():
    # W_0 = inf E[1 ^ |X - Y|]: far atoms cost 1, near atoms their distance
    mu = MeasureSummary([0.0, 10.0])
    nu = MeasureSummary([0.2, 20.0])
    res = wasserstein(mu, nu, 0.0, full=True)
    assert res.method == "lp" and res.exact
    assert res.value == pytest.approx(0.5 * 0.2 + 0.5 * 1.0)


def test_large_fractional_order_flags_upper_bound():
    mu = MeasureSummary(np.linspace(0, 1, 100))
    nu = MeasureSummary(np.linspace(0.5, 1.5, 100))
    res = wasserstein(mu, nu, 0.5, full=True)
    assert not res.exact and res.method == "quantile-upper-bound"


def test_higher_dimension_is_sliced_and_flagged():
    rng = np.random.default_rng(0)
    mu = MeasureSummary(rng.normal(size=(100, 2)))
    res = wasserstein(mu, mu, 1.0, full=True)
    assert res.method == "sliced" and not res.exact
    assert res.value == pytest.approx(0.0, abs=1e-12)


def test_self_inserted_measure_mean():
    base = MeasureSummary(np.array([[[1.0], [3.0]]]))  # one replica, two atoms
    pts = np.array([[0.0], [4.0]])
    m = SelfInsertedMeasure(base, pts, 1.0 / 3.0)
    # mean = (2/3) * 2 + (1/3) * x
    np.testing.assert_allclose(m.mean()[..., 0], [[4.0 / 3.0, 4.0 / 3.0 + 4.0 / 3.0]])


@settings(max_examples=60, deadline=None)
@given(atoms, atoms, atoms, st.sampled_from([1.0, 1.5, 2.0]))
def test_triangle_inequality(a, b, c, r):
    mu, nu, rho = MeasureSummary(a), MeasureSummary(b), MeasureSummary(c)
    assert wasserstein(mu, rho, r) <= wasserstein(mu, nu, r) + wasserstein(nu, rho, r) + 1e-9


@settings(max_examples=60, deadline=None)
@given(atoms, finite)
def test_translation(a, shift):
    mu = MeasureSummary(a)
    assert wasserstein(mu, MeasureSummary(a + shift), 1) == pytest.approx(abs(shift), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=finite), arrays(np.float64, st.integers(1, 10), elements=finite))
def test_truncated_lp_below_monotone_coupling(a, b):
    from mfglab.measures import _cost_fn, _monotone_cost
    mu, nu = MeasureSummary(a), MeasureSummary(b)
    assert wasserstein(mu, nu, 0.0) <= _monotone_cost(mu, nu, _cost_fn(0.0)) + 1e-9


@settings(max_examples=40, deadline=None)
@given(atoms, atoms)
def test_symmetry(a, b):
    mu, nu = MeasureSummary(a), MeasureSummary(b)
    assert wasserstein(mu, nu, 1) == pytest.approx(wasserstein(nu, mu, 1), abs=1e-12)


def test_histogram_measure_and_grid_scatter_conserve_mass():
    grid = StateGrid.centered([0.0], [3.0], 13)
    rng = np.random.default_rng(1)
    y = rng.normal(size=(500, 1)) * 2
    hist = grid.scatter(np.full(500, 1 / 500), y)
    assert hist.sum() == pytest.approx(1.0)
    m = MeasureSummary.from_histogram(grid, hist)
    assert m.weights.sum() == pytest.approx(1.0)


def test_grid_gather_is_exact_on_linear_functions():
    grid = StateGrid.uniform([-1.0, 0.0], [1.0, 2.0], [5, 7])
    vals = grid.points @ np.array([2.0, -1.0]) + 0.5
    q = np.array([[0.3, 1.1], [-0.9, 0.05]])
    np.testing.assert_allclose(grid.gather(vals, q), q @ np.array([2.0, -1.0]) + 0.5, atol=1e-12)
