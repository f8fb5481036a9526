import itertools
import warnings

import numpy as np
import pytest

from mfglab import dp
from mfglab.exceptions import ConfigurationError, DomainError
from mfglab.grids import StateGrid, TimeGrid
from mfglab.measures import MeasureFlow, MeasureSummary, wasserstein
from mfglab.mfe import (BoundaryWarning, MfeSolution, consistency_band, consistency_residual, evaluate_policy,
                        exploitability, flow_moment, forward_fp, moment_bound, picard_iterate, solve_hjb,
                        solve_mfe)
from mfglab.model import builtin_model, null_model
from mfglab.sde import constant_action, sample_scenarios, zero_scenario


def test_gauss_hermite_integrates_gaussian_moments():
    nodes, weights = dp.gauss_hermite(7, 1)
    assert weights.sum() == pytest.approx(1.0)
    assert np.sum(weights * nodes[:, 0] ** 2) == pytest.approx(1.0)
    assert np.sum(weights * nodes[:, 0] ** 4) == pytest.approx(3.0)
    nodes2, weights2 = dp.gauss_hermite(5, 2)
    assert nodes2.shape == (25, 2) and weights2.sum() == pytest.approx(1.0)


def test_argmax_ties_go_to_lowest_index():
    q = np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0], [0.0, -1.0, 5.0]])
    np.testing.assert_array_equal(dp.argmax_lowest(q), [1, 0, 2])


def _frozen_flow(tgrid, x=0.0):
    return MeasureFlow.constant(tgrid, MeasureSummary.dirac([x]))


def test_constant_terminal_value_and_tie_break():
    spec = null_model(terminal=1.5)
    tgrid = TimeGrid(1.0, 5)
    grid = StateGrid.centered([0.0], [6.0], 21)
    res = solve_hjb(spec, zero_scenario(tgrid, 1), _frozen_flow(tgrid), grid, boundary_tol=None)
    np.testing.assert_allclose(res.value, 1.5, atol=1e-12)
    assert np.all(res.policy == 0)


def test_one_step_pointwise_maximization():
    spec = null_model(n_actions=3).replace(running_cost=lambda t, x, m, a: -np.sum(a * a, axis=-1) + 0 * x[..., 0])
    tgrid = TimeGrid(1.0, 1)
    grid = StateGrid.centered([0.0], [6.0], 21)
    res = solve_hjb(spec, zero_scenario(tgrid, 1), _frozen_flow(tgrid), grid, boundary_tol=None)
    assert np.all(spec.actions[res.policy, 0] == 0.0)
    np.testing.assert_allclose(res.value[0], 0.0, atol=1e-12)


@pytest.mark.filterwarnings("ignore::mfglab.mfe.BoundaryWarning")
def test_dp_matches_exhaustive_policy_enumeration():
    # 3 bins x 2 steps with 2 actions: 2**6 table policies; the grid is deliberately narrow
    spec = builtin_model("lq_monotone", {"n_actions": 2})
    tgrid = TimeGrid(1.0, 2)
    grid = StateGrid.centered([0.0], [1.0], 3)
    sc = zero_scenario(tgrid, 1)
    flow = _frozen_flow(tgrid)
    res = solve_hjb(spec, sc, flow, grid, boundary_tol=None)
    best = np.full(3, -np.inf)
    for bits in itertools.product((0, 1), repeat=6):
        table = np.array(bits).reshape(2, 3)
        best = np.maximum(best, evaluate_policy(spec, sc, flow, grid, table)[0])
    np.testing.assert_array_equal(res.value[0], best)
    np.testing.assert_array_equal(evaluate_policy(spec, sc, flow, grid, res.policy)[0], best)


def test_forward_mass_and_driftless_shift():
    spec = null_model(drift_scale=0.0, gamma=1.0, sigma=0.05)
    tgrid = TimeGrid(1.0, 10)
    grid = StateGrid.centered([0.0], [5.0], 101)
    sc = sample_scenarios(1, tgrid, 1, seed=4)[0]
    init = np.zeros(grid.size)
    init[grid.size // 2] = 1.0
    flow = forward_fp(spec, sc, np.zeros((10, grid.size), dtype=int), grid, init)
    np.testing.assert_allclose(flow.histograms.sum(axis=1), 1.0, atol=1e-12)
    means = flow.histograms @ grid.points[:, 0]
    assert np.all(np.abs(means - sc.path[:, 0]) <= grid.bin_width)


def test_forward_rejects_bad_tables():
    spec = null_model(n_actions=3)
    tgrid = TimeGrid(1.0, 4)
    grid = StateGrid.centered([0.0], [5.0], 11)
    sc = zero_scenario(tgrid, 1)
    init = spec.initial_law.histogram(grid)
    with pytest.raises(DomainError):
        forward_fp(spec, sc, np.zeros((3, 11), dtype=int), grid, init)
    with pytest.raises(DomainError):
        forward_fp(spec, sc, np.full((4, 11), 9), grid, init)


def test_forward_matches_particle_cloud_without_interaction():
    spec = builtin_model("lq_monotone", {"c": 0.0, "c_g": 0.0, "n_actions": 21})
    tgrid = TimeGrid(1.0, 10)
    grid = StateGrid.centered([0.5], [7.5], 61)
    sc = sample_scenarios(1, tgrid, 1, seed=1)[0]
    table = np.full((10, grid.size), 15, dtype=int)
    flow = forward_fp(spec, sc, table, grid, spec.initial_law.histogram(grid))
    from mfglab.sde import TablePolicy, simulate_exogenous_mkv
    pol = TablePolicy({None: table}, grid)
    m = 4000
    cloud = simulate_exogenous_mkv(spec, sc, flow, pol, m, seed=2).states[0]
    for j in range(11):
        w = wasserstein(MeasureSummary(cloud[:, j]), flow[j], 1)
        std = np.sqrt(flow.histograms[j] @ (grid.points[:, 0] - flow.histograms[j] @ grid.points[:, 0]) ** 2)
        assert w <= grid.bin_width + 3.0 * std / np.sqrt(m)


def test_measure_independent_model_converges_after_one_application(small_lq):
    spec, tgrid, grid = small_lq
    spec = spec.replace(running_cost=lambda t, x, m, a: -0.5 * np.sum(a * a, axis=-1) - 0.1 * x[..., 0] ** 2,
                        terminal_cost=lambda x, m: -0.1 * x[..., 0] ** 2)
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    sol = picard_iterate(spec, sc, grid, damping=1.0, tol=1e-3, max_iter=5)
    s = sol[0]
    assert s.converged and s.iterations <= 2 and s.trace[-1] == 0.0


def test_picard_converges_and_conserves_mass(small_lq):
    spec, tgrid, grid = small_lq
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    sol = picard_iterate(spec, sc, grid, damping=0.25, tol=1e-3, max_iter=200)
    s = sol[0]
    assert s.converged and s.trace[-1] < 1e-3
    np.testing.assert_allclose(s.histograms.sum(axis=1), 1.0, atol=1e-9)
    assert exploitability(spec, sol, sc) == pytest.approx(0.0, abs=1e-8)


def test_picard_is_deterministic(small_lq):
    spec, tgrid, grid = small_lq
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    a, b = picard_iterate(spec, sc, grid)[0], picard_iterate(spec, sc, grid)[0]
    np.testing.assert_array_equal(a.policy, b.policy)
    np.testing.assert_array_equal(a.histograms, b.histograms)


def test_crowd_model_converges_with_strong_damping():
    spec = builtin_model("lq_crowd", {"c": 3.0})
    tgrid = TimeGrid(1.0, 10)
    grid = StateGrid.centered([0.5], [7.5], 31)
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    sol = picard_iterate(spec, sc, grid, damping=0.25, tol=1e-3, max_iter=200)
    s = sol[0]
    assert s.converged and s.trace[-1] < 1e-3


def test_picard_argument_checks(small_lq):
    spec, tgrid, grid = small_lq
    sc = zero_scenario(tgrid, 1)
    with pytest.raises(ConfigurationError):
        picard_iterate(spec, sc, grid, damping=0.0)
    with pytest.raises(ConfigurationError):
        picard_iterate(spec, sc, grid, tol=0.0)
    with pytest.raises(ConfigurationError):
        solve_mfe(spec, [sc, sc], grid)


def test_narrow_grid_is_rejected(small_lq):
    spec, tgrid, _ = small_lq
    with pytest.raises(ConfigurationError):
        picard_iterate(spec, zero_scenario(tgrid, 1), StateGrid.centered([0.5], [1.0], 11))


def test_exploitability_of_constant_extreme_action(small_lq):
    spec, tgrid, grid = small_lq
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    sol = picard_iterate(spec, sc, grid)
    a_max = spec.params["a_max"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        gap = exploitability(spec, sol, sc, policy=constant_action(spec.n_actions - 1))
    assert gap >= a_max ** 2 * spec.horizon / 4


def test_null_objective_has_no_exploitability():
    spec = null_model()
    tgrid = TimeGrid(1.0, 5)
    grid = StateGrid.centered([0.0], [6.0], 21)
    sc = zero_scenario(tgrid, 1)
    sol = picard_iterate(spec, sc, grid)
    assert exploitability(spec, sol, sc, policy=constant_action(3)) == 0.0


def test_value_is_monotone_in_terminal_cost(small_lq):
    spec, tgrid, grid = small_lq
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    flow = _frozen_flow(tgrid, 0.5)
    higher = spec.replace(terminal_cost=lambda x, m: spec.terminal_cost(x, m) + 0.3 * np.exp(-x[..., 0] ** 2))
    v0 = solve_hjb(spec, sc, flow, grid, boundary_tol=None).value
    v1 = solve_hjb(higher, sc, flow, grid, boundary_tol=None).value
    assert np.all(v1 >= v0 - 1e-12)


def test_flow_moment_stays_below_gronwall_bound(small_lq):
    spec, tgrid, grid = small_lq
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    sol = picard_iterate(spec, sc, grid)
    assert flow_moment(sol, 0, spec.p_prime) <= moment_bound(spec)


def test_consistency_residual_within_band(small_lq):
    spec, tgrid, grid = small_lq
    sc = sample_scenarios(1, tgrid, 1, seed=0)[0]
    sol = picard_iterate(spec, sc, grid)
    res = consistency_residual(spec, sol, sc, 2000, seed=1)
    assert res.shape == (tgrid.n_steps + 1,)
    assert np.all(res <= consistency_band(sol, 0, 2000))


def test_solution_roundtrip(tmp_path, small_lq):
    spec, tgrid, grid = small_lq
    sol = solve_mfe(spec, sample_scenarios(2, tgrid, 1, seed=0), grid)
    bin_path, json_path = sol.save(tmp_path / "mfe")
    assert bin_path.exists() and json_path.exists()
    back = MfeSolution.load(tmp_path / "mfe")
    assert back.scenario_ids == sol.scenario_ids and back.state_grid == sol.state_grid
    for k in sol.scenario_ids:
        np.testing.assert_array_equal(back[k].policy, sol[k].policy)
        np.testing.assert_array_equal(back[k].histograms, sol[k].histograms)
        np.testing.assert_array_equal(back[k].value, sol[k].value)
        assert back[k].trace == sol[k].trace
    bin_path.write_bytes(bin_path.read_bytes()[:-8] + b"\0" * 8)
    with pytest.raises(DomainError):
        MfeSolution.load(tmp_path / "mfe")


def test_trace_csv(tmp_path, small_lq):
    spec, tgrid, grid = small_lq
    sol = solve_mfe(spec, sample_scenarios(2, tgrid, 1, seed=0), grid)
    sol.write_trace_csv(tmp_path / "trace.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "scenario,iteration,distance"
    assert len(rows) == 1 + sum(sol[k].iterations for k in sol.scenario_ids)


def test_missing_scenario_is_domain_error(small_lq):
    spec, tgrid, grid = small_lq
    sol = picard_iterate(spec, zero_scenario(tgrid, 1), grid)
    with pytest.raises(DomainError):
        sol[42]
