import itertools

import numpy as np
import pytest

from mfglab.exceptions import ConfigurationError, DomainError
from mfglab.grids import StateGrid, TimeGrid
from mfglab.mfe import solve_mfe
from mfglab.model import builtin_model, null_model
from mfglab.nash import (FrozenEnvironment, GAP_CSV_HEADER, best_response, class_inclusion_experiment,
                         constructed_equilibrium, nash_gap, random_search_bound, write_gap_csv)
from mfglab.sde import PolicyKind, assign_scenarios, constant_action, generate_noise, sample_scenarios


@pytest.fixture(scope="module")
def small_equilibrium(small_lq):
    spec, tgrid, grid = small_lq
    scenarios = sample_scenarios(2, tgrid, 1, seed=3)
    return spec, tgrid, grid, scenarios, solve_mfe(spec, scenarios, grid, damping=0.25, max_iter=200)


def test_frozen_dp_matches_exhaustive_tables():
    spec = builtin_model("lq_monotone", {"n_actions": 2})
    tgrid = TimeGrid(1.0, 2)
    grid = StateGrid.centered([0.0], [1.0], 3)
    noise = generate_noise(5, 2, tgrid, spec, replicas=4)
    env = FrozenEnvironment(spec, noise, [constant_action(0), constant_action(1)], 0, grid)
    best = np.full(grid.size, -np.inf)
    for bits in itertools.product((0, 1), repeat=6):
        best = np.maximum(best, env.evaluate(np.array(bits).reshape(2, 3))[0])
    res = env.solve()
    np.testing.assert_array_equal(res.value[0], best)
    np.testing.assert_array_equal(env.evaluate(res.policy)[0], best)


def test_null_model_has_zero_gap():
    spec = null_model()
    tgrid = TimeGrid(1.0, 5)
    grid = StateGrid.centered([0.0], [6.0], 21)
    noise = generate_noise(1, 3, tgrid, spec, replicas=8)
    rep = nash_gap(spec, noise, [constant_action(4)] * 3, "per_player_max", "Markovian", grid)
    assert rep.gap == 0.0 and rep.gap_se == 0.0


def test_quadratic_control_cost_best_response_is_zero_action():
    spec = null_model().replace(running_cost=lambda t, x, m, a: -0.5 * np.sum(a * a, axis=-1) + 0 * x[..., 0])
    tgrid = TimeGrid(1.0, 5)
    grid = StateGrid.centered([0.0], [6.0], 21)
    noise = generate_noise(2, 2, tgrid, spec, replicas=8)
    br = best_response(spec, noise, [constant_action(4)] * 2, 0, "Markovian", grid)
    zero = int(np.flatnonzero(spec.actions[:, 0] == 0.0)[0])
    assert all(np.all(t == zero) for t in br.tables.values())
    assert br.gap == pytest.approx(0.5 * spec.horizon)


def test_terminal_shift_leaves_best_response_unchanged():
    spec = builtin_model("lq_monotone", {"n_actions": 11})
    shifted = spec.replace(terminal_cost=lambda x, m: spec.terminal_cost(x, m) + 3.0)
    tgrid = TimeGrid(1.0, 5)
    grid = StateGrid.centered([0.5], [7.5], 31)
    noise = generate_noise(3, 3, tgrid, spec, replicas=6)
    pols = [constant_action(5)] * 3
    a = best_response(spec, noise, pols, 1, "Markovian", grid)
    b = best_response(shifted, noise, pols, 1, "Markovian", grid)
    np.testing.assert_array_equal(a.tables[None], b.tables[None])
    assert b.dp_value == pytest.approx(a.dp_value + 3.0)


def test_averaged_gap_below_max_gap():
    spec = builtin_model("lq_monotone", {"n_actions": 11})
    tgrid = TimeGrid(1.0, 5)
    grid = StateGrid.centered([0.5], [7.5], 31)
    noise = generate_noise(4, 3, tgrid, spec, replicas=6)
    pols = [constant_action(2), constant_action(5), constant_action(9)]
    avg = nash_gap(spec, noise, pols, "averaged", "Markovian", grid)
    top = nash_gap(spec, noise, pols, "per_player_max", "Markovian", grid)
    assert not avg.exchangeable and avg.players == [0, 1, 2]
    assert avg.gap <= top.gap + 3.0 * top.gap_se
    assert avg.averaged_gap == pytest.approx(np.mean(top.gaps))


def test_constructed_equilibrium_profile(small_equilibrium):
    *_, sol = small_equilibrium
    prof = constructed_equilibrium(sol, 4)
    assert len(prof) == 4 and all(p is prof[0] for p in prof)
    assert prof[0].kind == PolicyKind.S_CLOSED_LOOP
    with pytest.raises(DomainError):
        constructed_equilibrium(sol, 4, [99])
    with pytest.raises(ConfigurationError):
        constructed_equilibrium(sol, 0)


def test_equilibrium_gap_is_small_compared_with_a_bad_profile(small_equilibrium):
    spec, tgrid, grid, scenarios, sol = small_equilibrium
    R = 8
    noise = generate_noise(6, 4, tgrid, spec, replicas=R)
    per_replica = assign_scenarios(scenarios, R)
    eq = nash_gap(spec, noise, constructed_equilibrium(sol, 4), "per_player_max", "SClosedLoop", grid,
                  scenarios=per_replica)
    bad = nash_gap(spec, noise, [constant_action(spec.n_actions - 1)] * 4, "per_player_max", "SClosedLoop",
                   grid, scenarios=per_replica)
    assert eq.exchangeable and len(eq.gaps) == 4
    assert eq.gap < bad.gap - 3.0 * np.hypot(eq.gap_se, bad.gap_se)


def test_random_search_never_beats_dp_by_much(small_equilibrium):
    spec, tgrid, grid, scenarios, sol = small_equilibrium
    R = 8
    noise = generate_noise(7, 3, tgrid, spec, replicas=R)
    per_replica = assign_scenarios(scenarios, R)
    pols = constructed_equilibrium(sol, 3)
    br = best_response(spec, noise, pols, 0, "SClosedLoop", grid, scenarios=per_replica)
    value, se, _, _ = random_search_bound(spec, noise, pols, 0, grid, br.tables, scenarios=per_replica, trials=3)
    assert value <= br.value + 3.0 * np.hypot(se, br.se)


def test_conditional_class_inclusion(small_equilibrium):
    spec, tgrid, grid, scenarios, sol = small_equilibrium
    R = 8
    noise = generate_noise(8, 3, tgrid, spec, replicas=R)
    rep = class_inclusion_experiment(spec, noise, constructed_equilibrium(sol, 3), grid,
                                     scenarios=assign_scenarios(scenarios, R))
    assert rep.conditional and rep.passed and len(rep.per_scenario) == 2


def test_closed_loop_class_needs_scenarios():
    spec = null_model()
    tgrid = TimeGrid(1.0, 3)
    grid = StateGrid.centered([0.0], [6.0], 21)
    noise = generate_noise(0, 2, tgrid, spec, replicas=2)
    with pytest.raises(ConfigurationError):
        best_response(spec, noise, [constant_action(0)] * 2, 0, "SClosedLoop", grid)
    with pytest.raises(ConfigurationError):
        nash_gap(spec, noise, [constant_action(0)] * 2, "median", "Markovian", grid)
    with pytest.raises(ConfigurationError):
        nash_gap(spec, noise, [constant_action(0)] * 2, "averaged", "Markovian", None)
    with pytest.raises(ConfigurationError):
        nash_gap(spec, noise, [constant_action(0)] * 2, "averaged", "Constant", grid)
    with pytest.raises(DomainError):
        FrozenEnvironment(spec, noise, [constant_action(0)] * 2, 5, grid)


def test_gap_csv(tmp_path):
    spec = null_model()
    tgrid = TimeGrid(1.0, 3)
    grid = StateGrid.centered([0.0], [6.0], 21)
    noise = generate_noise(0, 2, tgrid, spec, replicas=3)
    rep = nash_gap(spec, noise, [constant_action(0)] * 2, "averaged", "Markovian", grid, seed=0)
    write_gap_csv([rep], tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == ",".join(GAP_CSV_HEADER) and lines[1].startswith("2,Markovian,averaged,0,")
