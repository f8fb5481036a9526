"""Experiments and verification suites driven by an `ExperimentConfig`.

Each runner returns its records and a verdict and, when given a
`ReportWriter`, streams them to disk. All randomness is addressed by the
configured seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..exceptions import ConfigurationError, DependencyError
from ..girsanov import (clipped_state, calibrate_dt_constant, verify_measure_change, xi_process,
                        zeta_process)
from ..measures import flow_distance
from ..mfe import (MfeSolution, consistency_band, consistency_residual, exploitability, solve_mfe,
                   value_scale)
from ..model import builtin_model, check_lasry_lions, random_measure_pairs, validate_assumptions
from ..nash import class_inclusion_experiment, constructed_equilibrium, nash_gap, write_gap_csv
from ..sde import (Policy, assign_scenarios, constant_action, generate_noise, markovian, nearest_action,
                   sample_scenarios, simulate_nplayer, sup_norm_moment, write_moments_csv, write_trajectory)
from ..spde import BumpTestFunction, residual_scaling
from .config import ExperimentConfig
from .io import ReportWriter


@dataclass
class SuiteResult:
    """Verdict of one suite with its records. Informational suites never fail a run."""

    name: str
    passed: bool
    informational: bool = False
    records: list = field(default_factory=list)
    detail: dict = field(default_factory=dict)

    @property
    def blocking_failure(self) -> bool:
        return not self.passed and not self.informational


@dataclass
class RunResult:
    name: str
    passed: bool
    suites: list = field(default_factory=list)
    detail: dict = field(default_factory=dict)


def _emit(writer, metric, value, **kw):
    if writer is not None:
        return writer.record(metric, value, **kw)
    return None


# ---------------------------------------------------------------------------
# shared pieces


def middle_action(spec) -> int:
    """Index of the action nearest to zero."""
    return int(nearest_action(spec, np.zeros(spec.action_dim)))


def feedback_policy(spec, gain: float = 0.5, shift: float = 0.0, name: str = "") -> Policy:
    """Markovian ``a = nearest(-gain * x + shift)`` on the player's own state."""
    def fn(t, states, players):
        return nearest_action(spec, -gain * states[:, players] + shift)
    return markovian(fn, name or f"feedback[{gain},{shift}]")


def build_scenarios(config: ExperimentConfig, spec=None) -> list:
    spec = spec or config.model()
    sc = config["scenarios"]
    return sample_scenarios(int(sc["count"]), config.time_grid(), spec.dim, int(sc["seed"]))


def solve_equilibrium(config: ExperimentConfig, spec=None, scenarios=None) -> MfeSolution:
    spec = spec or config.model()
    scenarios = scenarios or build_scenarios(config, spec)
    p = config["picard"]
    return solve_mfe(spec, scenarios, config.state_grid(spec), float(p["damping"]), float(p["tol"]),
                     int(p["max_iter"]), quad_points=int(config["grid"]["quad_points"]),
                     boundary_tol=p["boundary_tol"], workers=config.workers)


def _require(sol: Optional[MfeSolution], scenarios) -> None:
    if sol is None:
        raise DependencyError("the mean field solution has not been computed")
    missing = [s.scenario_id for s in scenarios if s.scenario_id not in sol.solutions]
    if missing:
        raise DependencyError(f"scenarios {missing} have no mean field solution")
    if not sol.converged:
        raise DependencyError("the mean field solution did not converge")


# ---------------------------------------------------------------------------
# single experiments


def run_validate(config: ExperimentConfig, writer: Optional[ReportWriter] = None) -> RunResult:
    spec = config.model()
    rep = validate_assumptions(spec, rng_seed=config.seed)
    for c in rep.clauses:
        _emit(writer, f"clause.{c.clause}", c.worst_margin, verdict="pass" if c.passed else "fail",
              stream="validate", detail=c.detail)
    return RunResult("validate", rep.passed, detail={"clauses": [c.clause for c in rep.clauses]})


def run_solve(config: ExperimentConfig, writer: Optional[ReportWriter] = None):
    spec = config.model()
    sol = solve_equilibrium(config, spec)
    if writer is not None:
        sol.save(writer.directory / "mfe")
        sol.write_trace_csv(writer.directory / "picard_trace.csv")
        for sid in sol.scenario_ids:
            s = sol[sid]
            _emit(writer, "picard.iterations", s.iterations, n=None, scenario=sid,
                  verdict="pass" if s.converged else "fail", stream="solve")
    return RunResult("solve-mfe", sol.converged, detail={"solution": sol})


def _policies_from(config, spec, sol, n):
    choice = str(config["simulate"]["policy"])
    if choice == "equilibrium":
        if sol is None:
            raise DependencyError("equilibrium policies need a solved mean field game")
        return constructed_equilibrium(sol, n), True
    if choice.startswith("constant:"):
        idx = int(choice.split(":", 1)[1])
        if not 0 <= idx < spec.n_actions:
            raise ConfigurationError(f"constant action {idx} outside [0, {spec.n_actions})")
        return [constant_action(idx)] * n, False
    raise ConfigurationError(f"unknown simulate policy {choice!r}")


def run_simulate(config: ExperimentConfig, writer: Optional[ReportWriter] = None, sol=None) -> RunResult:
    spec = config.model()
    n, R = int(config["simulate"]["n"]), int(config["simulate"]["replicas"])
    scenarios = None
    if str(config["simulate"]["policy"]) == "equilibrium" and sol is None:
        sol = solve_equilibrium(config, spec)
    policies, needs_scenario = _policies_from(config, spec, sol, n)
    if needs_scenario:
        scenarios = assign_scenarios(sol.scenarios, R)
    noise = generate_noise(config.seed, n, config.time_grid(), spec, R)
    traj = simulate_nplayer(spec, noise, policies, scenarios)
    q = max(spec.p_prime, 2.0)
    moment = sup_norm_moment(traj, q)
    if writer is not None:
        write_trajectory(traj, writer.directory / "trajectory.bin")
        write_moments_csv(traj, writer.directory / "moments.csv")
    _emit(writer, "sup_norm_moment", moment, n=n, stream="simulate", q=q)
    return RunResult("simulate", True, detail={"trajectory": traj, "moment": moment})


def run_nash_gap(config: ExperimentConfig, writer: Optional[ReportWriter] = None, sol=None) -> RunResult:
    spec = config.model()
    scenarios = build_scenarios(config, spec)
    sol = sol or solve_equilibrium(config, spec, scenarios)
    _require(sol, scenarios)
    cfg = config["nash"]
    n, R = int(cfg["n"]), int(cfg["replicas"])
    noise = generate_noise(config.seed, n, config.time_grid(), spec, R)
    rep = nash_gap(spec, noise, constructed_equilibrium(sol, n), str(cfg["mode"]), str(cfg["class"]),
                   sol.state_grid, scenarios=assign_scenarios(sol.scenarios, R), seed=config.seed)
    ok = rep.gap >= -3.0 * rep.gap_se
    _emit(writer, "nash_gap", rep.gap, se=rep.gap_se, n=n, verdict="pass" if ok else "fail", stream="nash",
          policy_class=rep.policy_class, mode=rep.mode)
    if writer is not None:
        write_gap_csv([rep], writer.directory / "nash_gap.csv")
    return RunResult("nash-gap", ok, detail={"report": rep})


# ---------------------------------------------------------------------------
# headline experiments


def run_forward_convergence(config: ExperimentConfig, writer: Optional[ReportWriter] = None,
                            sol: Optional[MfeSolution] = None) -> RunResult:
    """Conditional flow distance ``E sup_t W_r(mu^n_t, mu_t)`` per scenario and ``n``.

    Every replica of scenario ``s`` runs the constructed equilibrium with the
    scenario's common path injected. The verdict asks that, per scenario,
    the largest ``n`` beats the smallest by more than three combined SE.
    """
    spec = config.model()
    scenarios = build_scenarios(config, spec)
    sol = sol or solve_equilibrium(config, spec, scenarios)
    _require(sol, scenarios)
    cfg = config["convergence"]
    R, r = int(cfg["replicas"]), float(cfg["distance_order"])
    tgrid = sol.time_grid
    table = {}
    rows = []
    for sc in sol.scenarios:
        flow = sol.flow(sc.scenario_id)
        for n in cfg["n_list"]:
            # seed stream separated per scenario so each cell is reproducible on its own
            noise = generate_noise(config.seed + 7919 * (sc.scenario_id + 1), int(n), tgrid, spec, R)
            traj = simulate_nplayer(spec, noise, constructed_equilibrium(sol, int(n)), sc)
            d = np.array([flow_distance(traj.measure_flow(i), flow, r) for i in range(R)])
            mean, se = float(d.mean()), float(d.std(ddof=1) / np.sqrt(R))
            table[(sc.scenario_id, int(n))] = (mean, se)
            rows.append([sc.scenario_id, int(n), mean, se])
            _emit(writer, "flow_distance", mean, se=se, n=n, scenario=sc.scenario_id, stream="convergence")
    lo, hi = int(cfg["n_list"][0]), int(cfg["n_list"][-1])
    verdicts = {}
    for sc in sol.scenarios:
        (m0, s0), (m1, s1) = table[(sc.scenario_id, lo)], table[(sc.scenario_id, hi)]
        verdicts[sc.scenario_id] = bool(m1 < m0 - 3.0 * np.hypot(s0, s1))
        _emit(writer, "trend", m0 - m1, se=float(np.hypot(s0, s1)), scenario=sc.scenario_id,
              verdict="pass" if verdicts[sc.scenario_id] else "fail", stream="convergence")
    if writer is not None:
        writer.write_csv("convergence.csv", ["scenario", "n", "distance", "se"], rows)
    return RunResult("converge", all(verdicts.values()), detail={"table": table, "verdicts": verdicts})


def run_converse(config: ExperimentConfig, writer: Optional[ReportWriter] = None,
                 sol: Optional[MfeSolution] = None) -> RunResult:
    """Nash-gap lower bounds of the constructed equilibria for each ``n``.

    Passes when every gap is above ``-3 SE`` and the largest ``n`` has
    ``eps_N < eps_n0 / 2`` by more than one combined SE.
    """
    spec = config.model()
    scenarios = build_scenarios(config, spec)
    sol = sol or solve_equilibrium(config, spec, scenarios)
    _require(sol, scenarios)
    cfg = config["converse"]
    ns = [int(n) for n in cfg["n_list"]]
    reps = cfg["replicas"] * len(ns) if len(cfg["replicas"]) == 1 else cfg["replicas"]
    reports = []
    table = {}
    for n, R in zip(ns, reps):
        R = int(R)
        noise = generate_noise(config.seed, n, sol.time_grid, spec, R)
        rep = nash_gap(spec, noise, constructed_equilibrium(sol, n), "per_player_max", str(cfg["class"]),
                       sol.state_grid, scenarios=assign_scenarios(sol.scenarios, R), seed=config.seed)
        reports.append(rep)
        table[n] = (rep.gap, rep.gap_se)
        _emit(writer, "epsilon", rep.gap, se=rep.gap_se, n=n, stream="converse",
              verdict="pass" if rep.gap >= -3 * rep.gap_se else "fail", replicas=R)
    (e0, s0), (e1, s1) = table[ns[0]], table[ns[-1]]
    combined = float(np.hypot(s0 / 2.0, s1))
    trend = bool(e1 < e0 / 2.0 - combined)
    nonneg = all(g >= -3 * s for g, s in table.values())
    _emit(writer, "trend", e0 / 2.0 - e1, se=combined, stream="converse", verdict="pass" if trend else "fail")
    if writer is not None:
        write_gap_csv(reports, writer.directory / "converse.csv")
        for rep in reports:
            rep.to_jsonl(writer.directory / "converse_reports.jsonl", append=rep is not reports[0],
                         config_hash=writer.config_hash)
    return RunResult("converse", trend and nonneg, detail={"table": table, "trend": trend, "nonneg": nonneg})


# ---------------------------------------------------------------------------
# verification suites


def suite_martingale(config: ExperimentConfig, writer=None, zeta_fn: Callable = zeta_process) -> SuiteResult:
    """Mean of ``zeta_T`` within 3 SE of 1 on the configured model."""
    g = config["girsanov"]
    spec = config.model()
    tgrid = config.time_grid(int(g["n_steps"]))
    n, R = int(g["n"]), int(g["replicas"])
    noise = generate_noise(config.seed, n, tgrid, spec, R)
    base = [constant_action(middle_action(spec))] * n
    beta = feedback_policy(spec, 0.5, float(g["beta_shift"]))
    traj = simulate_nplayer(spec, noise, base)
    xi = xi_process(spec, traj, 0, beta)
    w = zeta_fn(xi, traj.dW[:, 0], tgrid.dt)
    zt = np.exp(w.log_zeta[:, -1])
    mean, se = float(zt.mean()), float(zt.std(ddof=1) / np.sqrt(R))
    ok = abs(mean - 1.0) <= 3.0 * se
    rec = _emit(writer, "zeta_terminal_mean", mean, se=se, n=n, verdict="pass" if ok else "fail", stream="suites",
                suite="martingale", replicas=R)
    return SuiteResult("martingale", ok, records=[rec], detail={"mean": mean, "se": se})


def suite_measure_change(config: ExperimentConfig, writer=None) -> SuiteResult:
    """Reweighted baseline against direct deviation on a model-by-seed matrix (pass rate at least 95%)."""
    g = config["girsanov"]
    n, R, Rc = int(g["n"]), int(g["matrix_replicas"]), int(g["calibration_replicas"])
    tgrid = config.time_grid(int(g["n_steps"]))
    functional = clipped_state(float(g["clip"]))
    outcomes = []
    records = []
    for name in g["models"]:
        spec = builtin_model(name) if name != config["model"]["name"] else config.model()
        beta = feedback_policy(spec, 0.5, float(g["beta_shift"]))
        base = [constant_action(middle_action(spec))] * n
        for seed in g["seeds"]:
            seed = int(seed) + config.seed
            C = calibrate_dt_constant(spec, seed + 1000, n, tgrid, Rc, lambda grid: base, 0, beta, functional)
            noise = generate_noise(seed, n, tgrid, spec, R)
            rep = verify_measure_change(spec, noise, base, 0, beta, functional, dt_constant=C, seed=seed)
            outcomes.append(rep.passed)
            records.append(_emit(writer, "measure_change", rep.difference, se=rep.combined_se, n=n,
                                 verdict="pass" if rep.passed else "fail", stream="suites", suite="measure_change",
                                 model=name, left=rep.left, right=rep.right, band=rep.band,
                                 allowance=rep.allowance, clip=rep.clip))
    rate = float(np.mean(outcomes))
    return SuiteResult("measure_change", rate >= 0.95, records=records, detail={"pass_rate": rate,
                                                                                 "outcomes": outcomes})


def _spde_setup(config):
    s = config["spde"]
    spec = config.model(overrides=dict(s["model"]))
    tgrid = config.time_grid(int(s["n_steps"]))
    base = feedback_policy(spec, 0.5, 0.0, "feedback")
    beta = feedback_policy(spec, 0.5, float(s["beta_shift"]), "shifted")
    phi = BumpTestFunction(spec.initial_law.mean, float(s["radius"]))
    return spec, tgrid, base, beta, phi


def suite_spde_scaling(config: ExperimentConfig, writer=None, kind: str = "fp") -> SuiteResult:
    """Slope of the terminal mean-square residual in ``n`` and domination by the bound."""
    s = config["spde"]
    spec, tgrid, base, beta, phi = _spde_setup(config)
    table = residual_scaling(spec, lambda n, grid: [base] * n, phi, s["n_list"], int(s["replicas"]), tgrid,
                             config.seed, kind=kind, beta=beta if kind == "nu" else None)
    name = "spde_scaling" if kind == "fp" else "nu_flow"
    ok = table.passed
    detail = {"slope": table.slope, "slope_se": table.slope_se, "allowance": table.allowance,
              "rows": [(r.n, r.estimate, r.se, r.bound) for r in table.rows]}
    if kind == "nu":
        mass_ok = all(dev <= 3.0 for dev in table.mass_max_dev)
        detail["mass_max_dev"] = table.mass_max_dev
        ok = ok and mass_ok
    records = [_emit(writer, f"{name}.mean_square", r.estimate, se=r.se, n=r.n, stream="suites", suite=name,
                     bound=r.bound, verdict="pass" if r.passed else "fail") for r in table.rows]
    records.append(_emit(writer, f"{name}.slope", table.slope, se=table.slope_se, stream="suites", suite=name,
                         verdict="pass" if ok else "fail", allowance=table.allowance))
    if writer is not None:
        table.write_csv(writer.directory / f"{name}.csv")
    return SuiteResult(name, ok, records=records, detail=detail)


def suite_consistency(config: ExperimentConfig, writer=None, sol: Optional[MfeSolution] = None) -> SuiteResult:
    """Picard convergence, particle consistency and zero exploitability on every scenario."""
    spec = config.model()
    scenarios = build_scenarios(config, spec)
    sol = sol or solve_equilibrium(config, spec, scenarios)
    c = config["consistency"]
    m = int(c["particles"])
    ok = True
    records = []
    detail = {}
    for sc in sol.scenarios:
        s = sol[sc.scenario_id]
        res = consistency_residual(spec, sol, sc, m, config.seed + sc.scenario_id)
        band = consistency_band(sol, sc.scenario_id, m, float(c["band"]))
        expl = exploitability(spec, sol, sc)
        scale = value_scale(sol, sc.scenario_id)
        cell = (s.converged and s.iterations <= int(config["picard"]["max_iter"])
                and bool(np.all(res <= band)) and expl <= 1e-6 * scale)
        ok = ok and cell
        detail[sc.scenario_id] = {"iterations": s.iterations, "converged": s.converged,
                                  "residual": float(res.max()), "band": float(band.min()),
                                  "exploitability": expl, "scale": scale}
        records.append(_emit(writer, "consistency_residual", float(res.max()), scenario=sc.scenario_id,
                             stream="suites", suite="consistency", verdict="pass" if cell else "fail",
                             iterations=s.iterations, exploitability=expl, band=float(band.min())))
    return SuiteResult("consistency", ok, records=records, detail=detail)


def suite_monotonicity(config: ExperimentConfig, writer=None) -> SuiteResult:
    spec = config.model()
    pairs = random_measure_pairs(spec.dim, 50, config.seed)
    rep = check_lasry_lions(spec, pairs, np.linspace(0.0, spec.horizon, 5))
    rec = _emit(writer, "lasry_lions_max", rep.max_value, stream="suites", suite="monotonicity",
                verdict="pass" if rep.passed else "fail")
    return SuiteResult("monotonicity", rep.passed, records=[rec], detail={"max": rep.max_value})


def suite_class_inclusion(config: ExperimentConfig, writer=None, sol: Optional[MfeSolution] = None) -> SuiteResult:
    """S-closed-loop gap against Markovian gap on the constructed equilibrium."""
    spec = config.model()
    scenarios = build_scenarios(config, spec)
    sol = sol or solve_equilibrium(config, spec, scenarios)
    _require(sol, scenarios)
    n, R = int(config["inclusion"]["n"]), int(config["inclusion"]["replicas"])
    noise = generate_noise(config.seed, n, sol.time_grid, spec, R)
    rep = class_inclusion_experiment(spec, noise, constructed_equilibrium(sol, n), sol.state_grid,
                                     scenarios=assign_scenarios(sol.scenarios, R))
    rec = _emit(writer, "class_inclusion.difference", rep.difference, se=rep.combined_se, n=n, stream="suites",
                suite="class_inclusion", verdict="pass" if rep.passed else "fail",
                markovian_gap=rep.markovian_gap, s_closed_loop_gap=rep.s_closed_loop_gap)
    return SuiteResult("class_inclusion", rep.passed, records=[rec], detail=rep.record())


def moment_statistic(spec, n: int, replicas: int, grid, seed: int) -> float:
    """``(1/n) sum_k mean ||X^k||_T^q`` under the zero action, ``q = max(p', 2)``."""
    noise = generate_noise(seed, n, grid, spec, replicas)
    traj = simulate_nplayer(spec, noise, [constant_action(middle_action(spec))] * n)
    return sup_norm_moment(traj, max(spec.p_prime, 2.0))


def suite_moments(config: ExperimentConfig, writer=None) -> SuiteResult:
    """Moment at the largest ``n`` at most twice the moment at the smallest, per model."""
    c = config["moments"]
    lo, hi = int(c["n_list"][0]), int(c["n_list"][-1])
    ok = True
    records = []
    detail = {}
    for name in c["models"]:
        spec = builtin_model(name) if name != config["model"]["name"] else config.model()
        grid = config.time_grid()
        m_lo = moment_statistic(spec, lo, int(c["replicas"]), grid, config.seed)
        m_hi = moment_statistic(spec, hi, int(c["replicas"]), grid, config.seed)
        cell = m_hi <= 2.0 * m_lo
        ok = ok and cell
        detail[name] = (m_lo, m_hi)
        records.append(_emit(writer, "moment_ratio", m_hi / m_lo, stream="suites", suite="moments", model=name,
                             verdict="pass" if cell else "fail", small=m_lo, large=m_hi))
    return SuiteResult("moments", ok, records=records, detail=detail)


def run_verification_suites(config: ExperimentConfig, writer: Optional[ReportWriter] = None, *,
                            zeta_fn: Callable = zeta_process, sol: Optional[MfeSolution] = None) -> RunResult:
    """Run every configured suite; the run fails iff a non-informational suite fails."""
    run = list(config["suites"]["run"])
    informational = set(config["suites"]["informational"])
    needs_sol = {"consistency", "class_inclusion"} & set(run)
    if needs_sol and sol is None:
        sol = solve_equilibrium(config)
    results = []
    for name in run:
        if name == "martingale":
            r = suite_martingale(config, writer, zeta_fn)
        elif name == "measure_change":
            r = suite_measure_change(config, writer)
        elif name == "spde_scaling":
            r = suite_spde_scaling(config, writer, "fp")
        elif name == "nu_flow":
            r = suite_spde_scaling(config, writer, "nu")
        elif name == "consistency":
            r = suite_consistency(config, writer, sol)
        elif name == "monotonicity":
            r = suite_monotonicity(config, writer)
        elif name == "class_inclusion":
            r = suite_class_inclusion(config, writer, sol)
        else:
            r = suite_moments(config, writer)
        r.informational = name in informational
        _emit(writer, "suite", 1.0 if r.passed else 0.0, stream="verdicts", suite=name,
              verdict="pass" if r.passed else ("info-fail" if r.informational else "fail"))
        results.append(r)
    passed = not any(r.blocking_failure for r in results)
    return RunResult("verify-all", passed, suites=results)
