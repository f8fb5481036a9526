"""Acceptance criteria at their stated tolerances.

Each test prints one ``criterion <k>: PASS|FAIL`` line with its headline
numbers, then asserts. Expensive pieces (the default equilibrium) come from
session fixtures in ``conftest.py``.
"""
import itertools
import time

import numpy as np
import pytest

from mfglab.grids import StateGrid, TimeGrid
from mfglab.lab.cli import EXIT_OK, main
from mfglab.lab.experiments import (run_converse, run_forward_convergence, suite_class_inclusion,
                                    suite_consistency, suite_martingale, suite_measure_change, suite_moments,
                                    suite_spde_scaling)
from mfglab.lab.io import ReportWriter
from mfglab.model import builtin_model, builtin_names
from mfglab.nash import FrozenEnvironment
from mfglab.sde import constant_action, generate_noise


@pytest.fixture
def verdict(capsys):
    def emit(k, title, passed, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {k:>2}: {'PASS' if passed else 'FAIL'}  {title}  {detail}")
        return passed
    return emit


@pytest.fixture
def writer(tmp_path, default_config):
    return ReportWriter(tmp_path, "acceptance", default_config.config_hash, default_config.seed)


def test_01_girsanov_martingale(default_config, writer, verdict):
    t0 = time.perf_counter()
    r = suite_martingale(default_config, writer)
    elapsed = time.perf_counter() - t0
    g = default_config["girsanov"]
    assert (g["n"], g["n_steps"], g["replicas"]) == (8, 25, 50_000)
    ok = r.passed and elapsed <= 120.0
    verdict(1, "Girsanov martingale", ok,
            f"mean={r.detail['mean']:.5f} se={r.detail['se']:.5f} time={elapsed:.1f}s")
    assert r.passed
    assert elapsed <= 120.0


def test_02_measure_change_equivalence(default_config, writer, verdict):
    r = suite_measure_change(default_config, writer)
    assert len(r.detail["outcomes"]) == 9
    verdict(2, "measure-change equivalence", r.passed, f"pass rate={r.detail['pass_rate']:.2f} over 3x3")
    assert r.passed


def test_03_spde_residual_scaling(default_config, writer, verdict):
    assert default_config["spde"]["n_list"] == [16, 64, 256, 1024]
    t0 = time.perf_counter()
    r = suite_spde_scaling(default_config, writer, "fp")
    elapsed = time.perf_counter() - t0
    ok = r.passed and elapsed <= 600.0
    below = all(est <= bound + r.detail["allowance"] for _, est, _, bound in r.detail["rows"])
    verdict(3, "SPDE residual scaling", ok,
            f"slope={r.detail['slope']:.3f}+-{r.detail['slope_se']:.3f} below bound={below} time={elapsed:.1f}s")
    assert -1.3 <= r.detail["slope"] <= -0.7
    assert below
    assert elapsed <= 600.0


def test_04_nu_flow_mass_and_residual(default_config, writer, verdict):
    r = suite_spde_scaling(default_config, writer, "nu")
    worst = max(r.detail["mass_max_dev"])
    verdict(4, "nu-flow mass and residual", r.passed,
            f"worst mass deviation={worst:.2f} SE slope={r.detail['slope']:.3f}")
    assert worst <= 3.0
    assert -1.3 <= r.detail["slope"] <= -0.7
    assert r.passed


def test_05_mfe_fixed_point(default_config, lq_solution, writer, verdict):
    p, g = default_config["picard"], default_config["grid"]
    assert (p["damping"], p["tol"], g["state_bins"], g["n_steps"]) == (0.5, 1e-3, 61, 25)
    assert len(lq_solution.scenario_ids) == 8
    r = suite_consistency(default_config, writer, lq_solution)
    iters = max(c["iterations"] for c in r.detail.values())
    expl = max(c["exploitability"] / c["scale"] for c in r.detail.values())
    ok = r.passed and iters <= 50
    verdict(5, "MFE fixed point", ok, f"max iterations={iters} max exploitability/scale={expl:.2e}")
    assert ok


def _riccati_oracle(spec, scenario, tgrid):
    """Conditional mean flow of the LQ game along one common path.

    With ``f = -a^2/2 - c x mbar`` and ``g = -c_g x mbar`` the value is affine
    in ``x`` with slope ``p``, the optimal action is ``p`` (state independent)
    and in discrete time ``p_N = -c_g mbar_N``, ``p_j = p_{j+1} - c mbar_j dt``,
    ``mbar_{j+1} = mbar_j + p_{j+1} dt + gamma dB_j``. The forward-backward
    pair is linear and solved directly.
    """
    c, cg, gam = spec.params["c"], spec.params["c_g"], spec.params["gamma"]
    m0 = spec.params["m0"]
    N, dt = tgrid.n_steps, tgrid.dt
    dB = scenario.dB[:, 0]
    # unknowns z = (mbar_0..mbar_N, p_0..p_N)
    K = 2 * (N + 1)
    A = np.zeros((K, K))
    b = np.zeros(K)
    m, p = (lambda j: j), (lambda j: N + 1 + j)
    A[0, m(0)] = 1.0
    b[0] = m0
    for j in range(N):
        row = 1 + j
        A[row, m(j + 1)] = 1.0
        A[row, m(j)] = -1.0
        A[row, p(j + 1)] = -dt
        b[row] = gam * dB[j]
    A[N + 1, p(N)] = 1.0
    A[N + 1, m(N)] = cg
    for j in range(N):
        row = N + 2 + j
        A[row, p(j)] = 1.0
        A[row, p(j + 1)] = -1.0
        A[row, m(j)] = c * dt
    z = np.linalg.solve(A, b)
    return z[:N + 1], z[N + 1:]


def test_06_riccati_oracle(lq_spec, lq_solution, verdict):
    tgrid, grid = lq_solution.time_grid, lq_solution.state_grid
    x = grid.points[:, 0]
    width = float(np.max(grid.bin_width))
    s0, sig = lq_spec.params["s0"], lq_spec.params["sigma"]
    worst_mean = worst_std = 0.0
    for sc in lq_solution.scenarios:
        mbar, p = _riccati_oracle(lq_spec, sc, tgrid)
        assert np.all(np.abs(p) < lq_spec.params["a_max"])  # the action bound is inactive
        h = lq_solution[sc.scenario_id].histograms
        mean = h @ x
        std = np.sqrt(h @ x ** 2 - mean ** 2)
        worst_mean = max(worst_mean, float(np.max(np.abs(mean - mbar))))
        worst_std = max(worst_std, float(np.max(np.abs(std - np.sqrt(s0 ** 2 + sig ** 2 * tgrid.times)))))
    ok = worst_mean <= 2 * width and worst_std <= 2 * width
    verdict(6, "Riccati oracle", ok, f"max |mean err|={worst_mean:.4f} max |std err|={worst_std:.4f} "
                                     f"bin width={width:.3f}")
    assert ok


def test_07_best_response_dp_vs_brute_force(verdict):
    spec = builtin_model("lq_monotone", {"n_actions": 2})
    tgrid = TimeGrid(spec.horizon, 2)
    grid = StateGrid.centered([spec.params["m0"]], [1.0], 3)
    noise = generate_noise(0, 2, tgrid, spec, replicas=16)
    env = FrozenEnvironment(spec, noise, [constant_action(0), constant_action(1)], 0, grid)
    hist = env.initial_histogram()
    best_table = np.full(grid.size, -np.inf)
    best_value = -np.inf
    for bits in itertools.product(range(2), repeat=6):
        v = env.evaluate(np.array(bits).reshape(2, 3))[0]
        best_table = np.maximum(best_table, v)
        best_value = max(best_value, float(v @ hist))
    res = env.solve()
    dp_value = float(res.value[0] @ hist)
    ok = bool(np.array_equal(res.value[0], best_table)) and dp_value == best_value
    verdict(7, "DP vs brute force", ok, f"DP={dp_value!r} enumeration={best_value!r} over 64 tables")
    assert ok


def test_08_converse_trend(default_config, lq_solution, writer, verdict):
    assert default_config["converse"]["n_list"] == [16, 1024]
    r = run_converse(default_config, writer, lq_solution)
    (e0, s0), (e1, s1) = r.detail["table"][16], r.detail["table"][1024]
    verdict(8, "converse trend", r.passed, f"eps16={e0:.5f}+-{s0:.5f} eps1024={e1:.5f}+-{s1:.5f}")
    assert e1 < e0 / 2 - np.hypot(s0 / 2, s1)
    assert r.passed


def test_09_forward_convergence(default_config, lq_solution, writer, verdict):
    assert default_config["convergence"]["n_list"] == [16, 256]
    r = run_forward_convergence(default_config, writer, lq_solution)
    rows = []
    for sid in lq_solution.scenario_ids:
        (m0, s0), (m1, s1) = r.detail["table"][(sid, 16)], r.detail["table"][(sid, 256)]
        assert m1 < m0 - 3 * np.hypot(s0, s1), sid
        rows.append(f"{m0:.3f}->{m1:.3f}")
    verdict(9, "forward convergence", r.passed, "per scenario " + " ".join(rows))
    assert r.passed


def test_10_class_inclusion(default_config, lq_solution, writer, verdict):
    assert default_config["inclusion"]["n"] == 64
    r = suite_class_inclusion(default_config, writer, lq_solution)
    d = r.detail
    verdict(10, "class inclusion", r.passed,
            f"SClosedLoop={d['s_closed_loop_gap']:.5f} Markovian={d['markovian_gap']:.5f} "
            f"combined se={d['combined_se']:.5f}")
    assert d["s_closed_loop_gap"] <= d["markovian_gap"] + 3 * d["combined_se"]


def test_11_moment_uniformity(default_config, writer, verdict):
    c = default_config["moments"]
    assert c["n_list"] == [8, 1024] and set(c["models"]) == set(builtin_names())
    r = suite_moments(default_config, writer)
    ratios = " ".join(f"{k}={hi / lo:.3f}" for k, (lo, hi) in r.detail.items())
    verdict(11, "moment uniformity", r.passed, ratios)
    assert all(hi <= 2 * lo for lo, hi in r.detail.values())


def test_12_determinism(tmp_path, verdict):
    def run(out):
        codes = [main(["validate", "--out", str(out)]), main(["solve-mfe", "--out", str(out)])]
        stem = out / "solve-mfe" / "mfe"
        codes.append(main(["simulate", "--out", str(out), "--solution", str(stem)]))
        codes.append(main(["converge", "--out", str(out), "--solution", str(stem)]))
        return codes

    codes = run(tmp_path / "a") + run(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    other = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = all(c == EXIT_OK for c in codes) and files == other and not differing
    verdict(12, "determinism", ok, f"{len(files)} report files compared, differing={differing}")
    assert all(c == EXIT_OK for c in codes)
    assert files == other and files
    assert not differing
