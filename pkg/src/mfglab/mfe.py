"""Mean field equilibria per common-noise scenario.

For each sampled ``B`` path the solver alternates a backward dynamic program
against a frozen measure flow with a forward push of the initial law under
the resulting policy, and damps the update until the flow stops moving.
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import dp
from .exceptions import ConfigurationError, DomainError, InternalError
from .grids import StateGrid, TimeGrid
from .measures import MeasureFlow, MeasureSummary, empirical_w1_scale, wasserstein
from .model import ModelSpec
from .sde import (CommonScenario, Policy, PolicyContext, PolicyKind, TablePolicy,
                  simulate_exogenous_mkv)

FORMAT_NAME = "mfglab.MfeSolution"
FORMAT_VERSION = 1
DEFAULT_BOUNDARY_TOL = 0.01


class BoundaryWarning(UserWarning):
    """Some quadrature mass left the state box and was clamped to its edge."""


# ---------------------------------------------------------------------------
# grids and coefficients


def default_state_grid(spec: ModelSpec, bins: int = 61, scale: float = 5.0) -> StateGrid:
    """Box centered at the initial mean with half-width ``scale (|sigma| + |gamma|) sqrt(T)``
    plus the initial spread."""
    spread = scale * (np.linalg.norm(spec.sigma, 2) + np.linalg.norm(spec.gamma, 2)) * np.sqrt(spec.horizon)
    spread += scale * np.sqrt(np.max(np.diag(spec.initial_law.cov), initial=0.0))
    return StateGrid.centered(spec.initial_law.mean, np.full(spec.dim, spread), bins)


def scenario_time_grid(spec: ModelSpec, scenario: CommonScenario) -> TimeGrid:
    return TimeGrid(spec.horizon, scenario.n_steps)


def _measures(mu_flow) -> list:
    return list(mu_flow.measures) if isinstance(mu_flow, MeasureFlow) else list(mu_flow)


def grid_coefficients(spec: ModelSpec, tgrid: TimeGrid, grid: StateGrid, measures: Sequence):
    """Rewards (N, G, A), drifts (N, G, A, d) and terminal values (G,) on the grid.

    ``measures[j]`` is whatever the coefficients accept at node ``j``, a
    `MeasureSummary` or a per-point `SelfInsertedMeasure`.
    """
    x = grid.points
    G, A, d, N = grid.size, spec.n_actions, spec.dim, tgrid.n_steps
    reward = np.empty((N, G, A))
    drift = np.empty((N, G, A, d))
    times = tgrid.times
    for j in range(N):
        m = measures[j]
        for i, a in enumerate(spec.actions):
            reward[j, :, i] = np.broadcast_to(spec.running_cost(float(times[j]), x, m, a), (G,))
            drift[j, :, i] = np.broadcast_to(spec.drift(float(times[j]), x, m, a), (G, d))
    terminal = np.broadcast_to(spec.terminal_cost(x, measures[N]), (G,)).astype(float)
    return reward, drift, terminal


def _shifts(spec: ModelSpec, scenario: CommonScenario) -> np.ndarray:
    return scenario.dB @ spec.gamma.T


def _flow_histograms(grid: StateGrid, measures) -> np.ndarray:
    return np.stack([grid.scatter(m.weights, m.atoms) for m in measures])


def hist_w1(grid: StateGrid, a, b) -> float:
    """``W_1`` between two histograms on the same grid (exact in d=1)."""
    if grid.dim == 1:
        return float(np.sum(np.abs(np.cumsum(a - b))[:-1]) * grid.spacing[0])
    return wasserstein(MeasureSummary.from_histogram(grid, a), MeasureSummary.from_histogram(grid, b), 1)


def _check_clamping(fraction: float, boundary_tol: Optional[float], where: str) -> None:
    if boundary_tol is not None and fraction > boundary_tol:
        raise ConfigurationError(
            f"{where}: {fraction:.3%} of quadrature mass left the state grid (limit {boundary_tol:.3%}); widen the grid"
        )
    if fraction > 1e-4:
        warnings.warn(f"{where}: {fraction:.3e} of quadrature mass clamped at the grid boundary", BoundaryWarning,
                      stacklevel=3)


# ---------------------------------------------------------------------------
# backward and forward passes


class HjbSolution(NamedTuple):
    value: np.ndarray   # (N+1, G)
    policy: np.ndarray  # (N, G)


def _backward(spec, tgrid, grid, measures, scenario, quad_points, policy=None):
    reward, drift, terminal = grid_coefficients(spec, tgrid, grid, measures)
    return dp.backward_pass(grid, tgrid, lambda j: reward[j], lambda j: drift[j], terminal,
                            _shifts(spec, scenario), spec.sigma, quad_points, policy)


def solve_hjb(spec: ModelSpec, scenario: CommonScenario, mu_flow, grid: StateGrid, quad_points: int = 7, *,
              boundary_tol: Optional[float] = DEFAULT_BOUNDARY_TOL) -> HjbSolution:
    """Best response to a frozen measure flow along one common path.

    Parameters
    ----------
    mu_flow : MeasureFlow
        Environment on the scenario's time grid.
    boundary_tol : float or None
        Largest admissible share of ``mu``-weighted quadrature mass clamped at
        the box boundary; ``None`` disables the check.

    Returns
    -------
    HjbSolution
        Value table ``(N_t+1, G)`` and policy table ``(N_t, G)`` of action
        indices; ties go to the lowest index.
    """
    tgrid = scenario_time_grid(spec, scenario)
    measures = _measures(mu_flow)
    if len(measures) != tgrid.n_steps + 1:
        raise DomainError("measure flow and scenario use different time grids")
    res = _backward(spec, tgrid, grid, measures, scenario, quad_points)
    hist = _flow_histograms(grid, measures)
    _check_clamping(float(np.max(np.sum(hist[:-1] * res.clamped, axis=1))), boundary_tol, "solve_hjb")
    return HjbSolution(res.value, res.policy)


def evaluate_policy(spec: ModelSpec, scenario: CommonScenario, mu_flow, grid: StateGrid, policy_table,
                    quad_points: int = 7) -> np.ndarray:
    """Value table of a fixed policy table against a frozen flow."""
    tgrid = scenario_time_grid(spec, scenario)
    res = _backward(spec, tgrid, grid, _measures(mu_flow), scenario, quad_points, np.asarray(policy_table))
    return res.value


@dataclass(frozen=True, eq=False)
class HistogramFlow(MeasureFlow):
    """A `MeasureFlow` carried by grid histograms, with the clamped mass per step."""

    state_grid: StateGrid = None
    histograms: np.ndarray = None
    clamped: np.ndarray = None

    @classmethod
    def build(cls, tgrid: TimeGrid, grid: StateGrid, hist, clamped=None) -> "HistogramFlow":
        hist = np.asarray(hist, dtype=float)
        measures = tuple(MeasureSummary.from_histogram(grid, h) for h in hist)
        clamped = np.zeros(tgrid.n_steps) if clamped is None else np.asarray(clamped, dtype=float)
        return cls(tgrid, measures, grid, hist, clamped)


def forward_fp(spec: ModelSpec, scenario: CommonScenario, policy_table, grid: StateGrid, initial_histogram,
               quad_points: int = 7, *, mu_flow=None, leak_tol: float = 1e-9) -> HistogramFlow:
    """Push a histogram forward under a policy table.

    The coefficients read `mu_flow` when given and the pushed law itself
    otherwise. Quadrature mass leaving the box is clamped onto edge nodes and
    reported in the result's ``clamped`` array.
    """
    tgrid = scenario_time_grid(spec, scenario)
    policy_table = np.asarray(policy_table, dtype=np.int64)
    if policy_table.shape != (tgrid.n_steps, grid.size):
        raise DomainError(f"policy table shape {policy_table.shape} does not match {(tgrid.n_steps, grid.size)}")
    if np.any(policy_table < 0) or np.any(policy_table >= spec.n_actions):
        raise DomainError("policy table holds invalid action indices")
    initial = np.asarray(initial_histogram, dtype=float)
    if initial.shape != (grid.size,):
        raise DomainError("initial histogram does not live on the grid")
    if mu_flow is not None:
        _, drift, _ = grid_coefficients(spec, tgrid, grid, _measures(mu_flow))

        def drift_at(j, hist):
            return drift[j]
    else:
        drift_at = _self_drift(spec, tgrid, grid)
    res = dp.forward_pass(grid, tgrid, policy_table, drift_at, _shifts(spec, scenario), spec.sigma, initial,
                          quad_points, leak_tol)
    return HistogramFlow.build(tgrid, grid, res.histograms, res.clamped)


def _self_drift(spec, tgrid, grid):
    x = grid.points
    times = tgrid.times

    def drift_at(j, hist):
        m = MeasureSummary.from_histogram(grid, hist)
        return np.stack([np.broadcast_to(spec.drift(float(times[j]), x, m, a), x.shape) for a in spec.actions], axis=1)
    return drift_at


# ---------------------------------------------------------------------------
# solutions


@dataclass(frozen=True, eq=False)
class ScenarioSolution:
    """Equilibrium flow, policy and value tables along one common path."""

    scenario: CommonScenario
    histograms: np.ndarray
    policy: np.ndarray
    value: np.ndarray
    trace: tuple
    converged: bool
    clamped: float = 0.0

    @property
    def scenario_id(self) -> int:
        return self.scenario.scenario_id

    @property
    def iterations(self) -> int:
        return len(self.trace)


@dataclass(frozen=True, eq=False)
class MfeSolution:
    """Per-scenario equilibria on a shared time and state grid."""

    model: str
    model_params: dict
    time_grid: TimeGrid
    state_grid: StateGrid
    solutions: dict
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.solutions.values():
            if not np.all(np.abs(s.histograms.sum(axis=1) - 1.0) <= 1e-9):
                raise InternalError(f"scenario {s.scenario_id} flow is not normalized")
            if np.any(s.policy < 0):
                raise InternalError("negative action index in policy table")

    @property
    def scenario_ids(self) -> list:
        return sorted(self.solutions)

    @property
    def scenarios(self) -> list:
        return [self.solutions[k].scenario for k in self.scenario_ids]

    @property
    def converged(self) -> bool:
        return all(s.converged for s in self.solutions.values())

    def __getitem__(self, scenario_id) -> ScenarioSolution:
        try:
            return self.solutions[int(scenario_id)]
        except KeyError:
            raise DomainError(f"no solution for scenario {scenario_id}") from None

    def flow(self, scenario_id) -> HistogramFlow:
        return HistogramFlow.build(self.time_grid, self.state_grid, self[scenario_id].histograms)

    def policy_table(self, kind=PolicyKind.S_CLOSED_LOOP) -> TablePolicy:
        """The scenario-indexed equilibrium policy as a simulator policy."""
        tables = {k: s.policy for k, s in self.solutions.items()}
        return TablePolicy(tables, self.state_grid, kind, name=f"mfe[{self.model}]")

    def initial_value(self, scenario_id) -> float:
        """``int V(0, x) lambda(dx)`` on the grid."""
        s = self[scenario_id]
        return float(s.value[0] @ s.histograms[0])

    def merge(self, other: "MfeSolution") -> "MfeSolution":
        if other.state_grid != self.state_grid or other.time_grid != self.time_grid:
            raise DomainError("solutions live on different grids")
        return MfeSolution(self.model, self.model_params, self.time_grid, self.state_grid,
                           {**self.solutions, **other.solutions}, self.settings)

    # -- persistence --------------------------------------------------------

    def save(self, stem) -> tuple:
        """Write ``<stem>.bin`` and the ``<stem>.json`` sidecar.

        The binary holds, per scenario in increasing id order, little-endian
        float64 ``dB (N_t, d)``, ``histograms (N_t+1, G)``, ``value (N_t+1, G)``
        and int64 ``policy (N_t, G)``. The sidecar records grids, shapes,
        scenario metadata, convergence traces and the binary's SHA-256.
        """
        stem = Path(stem)
        parts = []
        for k in self.scenario_ids:
            s = self.solutions[k]
            parts += [np.ascontiguousarray(s.scenario.dB, "<f8"), np.ascontiguousarray(s.histograms, "<f8"),
                      np.ascontiguousarray(s.value, "<f8"), np.ascontiguousarray(s.policy, "<i8")]
        blob = b"".join(p.tobytes() for p in parts)
        meta = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "model": self.model,
            "model_params": _jsonable(self.model_params),
            "horizon": self.time_grid.horizon,
            "n_steps": self.time_grid.n_steps,
            "grid": {"lower": self.state_grid.lower.tolist(), "upper": self.state_grid.upper.tolist(),
                     "bins": self.state_grid.bins.tolist()},
            "dim": self.state_grid.dim,
            "layout": ["dB:<f8:(N,d)", "histograms:<f8:(N+1,G)", "value:<f8:(N+1,G)", "policy:<i8:(N,G)"],
            "scenarios": [
                {"id": k, "weight": s.scenario.weight, "randomization": s.scenario.randomization,
                 "converged": s.converged, "iterations": s.iterations, "trace": list(s.trace),
                 "clamped": s.clamped}
                for k, s in ((k, self.solutions[k]) for k in self.scenario_ids)
            ],
            "settings": _jsonable(self.settings),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
        bin_path.write_bytes(blob)
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return bin_path, json_path

    @classmethod
    def load(cls, stem) -> "MfeSolution":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
        if meta.get("format") != FORMAT_NAME:
            raise DomainError("not an MfeSolution sidecar")
        blob = stem.with_suffix(".bin").read_bytes()
        if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
            raise DomainError("binary does not match its sidecar checksum")
        tgrid = TimeGrid(meta["horizon"], meta["n_steps"])
        grid = StateGrid(np.array(meta["grid"]["lower"]), np.array(meta["grid"]["upper"]),
                         np.array(meta["grid"]["bins"]))
        N, G, d = tgrid.n_steps, grid.size, meta["dim"]
        offset = 0

        def take(dtype, shape):
            nonlocal offset
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
            offset += count * 8
            return arr

        sols = {}
        for rec in meta["scenarios"]:
            dB = take("<f8", (N, d))
            hist = take("<f8", (N + 1, G))
            value = take("<f8", (N + 1, G))
            policy = take("<i8", (N, G)).astype(np.int64)
            sc = CommonScenario(rec["id"], dB, rec["weight"], rec["randomization"])
            sols[rec["id"]] = ScenarioSolution(sc, hist, policy, value, tuple(rec["trace"]), rec["converged"],
                                               rec["clamped"])
        return cls(meta["model"], meta["model_params"], tgrid, grid, sols, meta["settings"])

    def write_trace_csv(self, path, append: bool = False) -> None:
        """One row per (scenario, Picard update): the sup-over-nodes flow distance."""
        path = Path(path)
        fresh = not (append and path.exists())
        with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            if fresh:
                w.writerow(["scenario", "iteration", "distance"])
            for k in self.scenario_ids:
                for it, dist in enumerate(self.solutions[k].trace, start=1):
                    w.writerow([k, it, repr(float(dist))])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Picard iteration


def _initial_flow(spec, scenario, grid, tgrid, quad_points, initial_action=0):
    hist0 = spec.initial_law.histogram(grid)
    table = np.full((tgrid.n_steps, grid.size), int(initial_action), dtype=np.int64)
    return forward_fp(spec, scenario, table, grid, hist0, quad_points)


def picard_iterate(spec: ModelSpec, scenario: CommonScenario, grid: StateGrid, damping: float = 0.5,
                   tol: float = 1e-3, max_iter: int = 50, *, quad_points: int = 7,
                   boundary_tol: Optional[float] = DEFAULT_BOUNDARY_TOL, initial_action: int = 0) -> MfeSolution:
    """Damped fixed-point iteration ``mu <- (1 - theta) mu + theta FP(HJB(mu))``.

    Starts from the initial law pushed forward under action `initial_action`
    and stops once the sup-over-nodes ``W_1`` between successive iterates
    drops below `tol`. The trace records that distance for every update. A
    final backward pass against the returned flow produces the policy and
    value tables, so the policy is an exact grid best response to the flow.
    Non-convergence is reported through the ``converged`` flag.
    """
    if not 0.0 < damping <= 1.0:
        raise ConfigurationError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    if int(max_iter) < 1:
        raise ConfigurationError("max_iter must be at least 1")
    tgrid = scenario_time_grid(spec, scenario)
    mu = _initial_flow(spec, scenario, grid, tgrid, quad_points, initial_action).histograms
    hist0 = mu[0].copy()
    shifts = _shifts(spec, scenario)
    trace = []
    converged = False
    clamped = 0.0
    for _ in range(int(max_iter)):
        measures = [MeasureSummary.from_histogram(grid, h) for h in mu]
        reward, drift, terminal = grid_coefficients(spec, tgrid, grid, measures)
        back = dp.backward_pass(grid, tgrid, lambda j: reward[j], lambda j: drift[j], terminal, shifts,
                                spec.sigma, quad_points)
        fwd = dp.forward_pass(grid, tgrid, back.policy, lambda j, h: drift[j], shifts, spec.sigma, hist0,
                              quad_points)
        new = (1.0 - damping) * mu + damping * fwd.histograms
        dist = max(hist_w1(grid, a, b) for a, b in zip(new, mu))
        trace.append(float(dist))
        clamped = max(clamped, float(np.max(np.sum(mu[:-1] * back.clamped, axis=1))), float(np.max(fwd.clamped)))
        mu = new
        if dist < tol:
            converged = True
            break
    measures = [MeasureSummary.from_histogram(grid, h) for h in mu]
    final = _backward(spec, tgrid, grid, measures, scenario, quad_points)
    clamped = max(clamped, float(np.max(np.sum(mu[:-1] * final.clamped, axis=1))))
    _check_clamping(clamped, boundary_tol, f"picard_iterate (scenario {scenario.scenario_id})")
    if np.any(np.abs(mu.sum(axis=1) - 1.0) > 1e-9):
        raise InternalError("Picard iterate lost mass")
    sol = ScenarioSolution(scenario, mu, final.policy, final.value, tuple(trace), converged, clamped)
    settings = {"damping": float(damping), "tol": float(tol), "max_iter": int(max_iter), "quad_points": int(quad_points)}
    return MfeSolution(spec.name, dict(spec.params), tgrid, grid, {scenario.scenario_id: sol}, settings)


def solve_mfe(spec: ModelSpec, scenarios: Sequence[CommonScenario], grid: StateGrid, damping: float = 0.5,
              tol: float = 1e-3, max_iter: int = 50, *, quad_points: int = 7,
              boundary_tol: Optional[float] = DEFAULT_BOUNDARY_TOL, workers: int = 1) -> MfeSolution:
    """`picard_iterate` over independent scenarios, merged in id order."""
    scenarios = list(scenarios)
    if not scenarios:
        raise ConfigurationError("no scenarios to solve")
    ids = [s.scenario_id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("scenario ids must be distinct")
    total = sum(s.weight for s in scenarios)
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"scenario weights sum to {total}, not 1")

    def one(sc):
        return picard_iterate(spec, sc, grid, damping, tol, max_iter, quad_points=quad_points,
                              boundary_tol=boundary_tol)

    if int(workers) > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(one, scenarios))
    else:
        parts = [one(sc) for sc in scenarios]
    out = parts[0]
    for p in parts[1:]:
        out = out.merge(p)
    return out


def candidate_fixed_points(spec: ModelSpec, scenario: CommonScenario, grid: StateGrid, starts: Sequence[int],
                           damping: float = 0.25, tol: float = 1e-3, max_iter: int = 200, *,
                           quad_points: int = 7, separation: Optional[float] = None) -> list:
    """Converged equilibria reached from several constant-action starts.

    Distinct fixed points (sup-node ``W_1`` above `separation`, default
    ``10 tol``) are returned as `ScenarioSolution` objects whose scenario
    carries a randomization index, ready to be mixed as a weak equilibrium.
    """
    separation = 10 * tol if separation is None else separation
    found = []
    for a in starts:
        sol = picard_iterate(spec, scenario, grid, damping, tol, max_iter, quad_points=quad_points,
                             initial_action=a)[scenario.scenario_id]
        if not sol.converged:
            continue
        if all(max(hist_w1(grid, x, y) for x, y in zip(sol.histograms, f.histograms)) > separation for f in found):
            found.append(sol)
    out = []
    for u, s in enumerate(found):
        sc = CommonScenario(scenario.scenario_id, scenario.dB, scenario.weight / len(found), u)
        out.append(ScenarioSolution(sc, s.histograms, s.policy, s.value, s.trace, s.converged, s.clamped))
    return out


# ---------------------------------------------------------------------------
# diagnostics


def consistency_residual(spec: ModelSpec, sol: MfeSolution, scenario: CommonScenario, m_particles: int,
                         seed: int) -> np.ndarray:
    """Per-node ``W_1`` between an exogenous particle cloud and the solved flow.

    The cloud follows the equilibrium policy table in the solved environment
    along the scenario's common path.
    """
    s = sol[scenario.scenario_id]
    flow = sol.flow(scenario.scenario_id)
    traj = simulate_exogenous_mkv(spec, scenario, flow, sol.policy_table(), int(m_particles), seed)
    cloud = traj.states[0]
    return np.array([wasserstein(MeasureSummary(cloud[:, j], check=False), flow[j], 1)
                     for j in range(sol.time_grid.n_steps + 1)])


def consistency_band(sol: MfeSolution, scenario_id, m_particles: int, k: float = 3.0) -> np.ndarray:
    """``bin width + k * MC scale`` per node, the admissible consistency residual."""
    s = sol[scenario_id]
    mc = np.array([empirical_w1_scale(sol.state_grid, h, int(m_particles)) for h in s.histograms])
    return sol.state_grid.bin_width + k * mc


def policy_to_table(policy, sol: MfeSolution, scenario_id) -> np.ndarray:
    """Evaluate a policy at every (node, grid point) of a scenario.

    Table policies are read directly. Other policies are queried with the grid
    points as players, the scenario's common history and the solved flow, which
    is exact for policies reading only their own state and common information.
    """
    if isinstance(policy, np.ndarray):
        return policy.astype(np.int64)
    if isinstance(policy, TablePolicy) and policy.grid == sol.state_grid:
        key = None if None in policy.tables else int(scenario_id)
        return policy.tables[key].copy()
    grid, tgrid = sol.state_grid, sol.time_grid
    s = sol[scenario_id]
    flow = sol.flow(scenario_id)
    pts = grid.points
    G = grid.size
    B = s.scenario.path[None]
    out = np.empty((tgrid.n_steps, G), dtype=np.int64)
    for j in range(tgrid.n_steps):
        hist = np.broadcast_to(pts[None, :, None, :], (1, G, j + 1, grid.dim))
        ctx = PolicyContext(j, float(tgrid.times[j]), hist, B[:, :j + 1], np.arange(G),
                            np.array([s.scenario_id]), lambda l: flow[l])
        out[j] = policy(ctx)[0]
    return out


def exploitability(spec: ModelSpec, sol: MfeSolution, scenario: CommonScenario, policy=None,
                   quad_points: Optional[int] = None) -> float:
    """Best-response value minus the value of `policy` (default the solved one).

    Both are integrated against the initial histogram and computed by the
    same quadrature against the solved flow.
    """
    q = int(quad_points or sol.settings.get("quad_points", 7))
    s = sol[scenario.scenario_id]
    flow = sol.flow(scenario.scenario_id)
    tgrid = sol.time_grid
    measures = list(flow.measures)
    best = _backward(spec, tgrid, sol.state_grid, measures, scenario, q)
    table = s.policy if policy is None else policy_to_table(policy, sol, scenario.scenario_id)
    own = _backward(spec, tgrid, sol.state_grid, measures, scenario, q, table)
    h0 = s.histograms[0]
    return float(best.value[0] @ h0 - own.value[0] @ h0)


def value_scale(sol: MfeSolution, scenario_id) -> float:
    return max(1.0, abs(sol.initial_value(scenario_id)))


def moment_bound(spec: ModelSpec) -> float:
    """Gronwall-type ceiling for ``sup_t int |x|^{p'} d mu_t``.

    With ``|b| <= c1 (1 + |x| + M_p)`` Ito's formula for ``1 + |x|^q`` gives
    growth at rate at most ``q (3 c1 + (q - 1)(|sigma|^2 + |gamma|^2))``.
    """
    q = max(float(spec.p_prime), 2.0)
    rate = q * (3.0 * spec.c1 + (q - 1.0) * (np.sum(spec.sigma ** 2) + np.sum(spec.gamma ** 2)))
    return float(2.0 * (1.0 + spec.initial_law.moment(q)) * np.exp(rate * spec.horizon))


def flow_moment(sol: MfeSolution, scenario_id, q: float) -> float:
    """``sup_j int |x|^q d mu_j`` of a solved flow."""
    s = sol[scenario_id]
    norms = np.linalg.norm(sol.state_grid.points, axis=-1)
    return float(np.max(s.histograms @ (norms ** q if q else np.ones_like(norms))))
