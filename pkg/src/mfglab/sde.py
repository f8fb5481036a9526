"""Noise generation and Euler-Maruyama simulation of the n-player system.

Arrays carry a leading replica axis throughout: a `NoiseBundle` with ``R``
replicas holds ``dB`` of shape ``(R, N_t, d)``, ``dW`` of shape
``(R, n, N_t, d)`` and ``X0`` of shape ``(R, n, d)``, and simulation advances
all replicas in lockstep.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as streams
from .exceptions import ConfigurationError, DivergenceError, DomainError, ResourceError
from .grids import StateGrid, TimeGrid
from .measures import MeasureFlow, MeasureSummary
from .model import ModelSpec

DIVERGENCE_BOUND = 1e6
DEFAULT_MEMORY_BUDGET = 2 * 1024 ** 3


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Common increments, idiosyncratic increments and initial states."""

    seed: int
    grid: TimeGrid
    dB: np.ndarray
    dW: np.ndarray
    X0: np.ndarray
    replicas: np.ndarray

    @property
    def n(self) -> int:
        return self.dW.shape[1]

    @property
    def n_replicas(self) -> int:
        return self.dW.shape[0]

    @property
    def dim(self) -> int:
        return self.dW.shape[-1]

    def select(self, index) -> "NoiseBundle":
        index = np.atleast_1d(np.asarray(index))
        return NoiseBundle(self.seed, self.grid, self.dB[index], self.dW[index], self.X0[index], self.replicas[index])

    def replica(self, r: int) -> "NoiseBundle":
        return self.select([r])

    def with_common(self, dB) -> "NoiseBundle":
        dB = np.broadcast_to(np.asarray(dB, dtype=float), self.dB.shape).copy()
        return NoiseBundle(self.seed, self.grid, dB, self.dW, self.X0, self.replicas)

    def with_initial(self, X0) -> "NoiseBundle":
        X0 = np.broadcast_to(np.asarray(X0, dtype=float), self.X0.shape).copy()
        return NoiseBundle(self.seed, self.grid, self.dB, self.dW, X0, self.replicas)

    def zeroed(self, common: bool = True, idiosyncratic: bool = True) -> "NoiseBundle":
        return NoiseBundle(
            self.seed, self.grid,
            np.zeros_like(self.dB) if common else self.dB,
            np.zeros_like(self.dW) if idiosyncratic else self.dW,
            self.X0, self.replicas,
        )

    def permute_players(self, perm) -> "NoiseBundle":
        perm = np.asarray(perm)
        return NoiseBundle(self.seed, self.grid, self.dB, self.dW[:, perm], self.X0[:, perm], self.replicas)

    def tobytes(self) -> bytes:
        return self.dB.tobytes() + self.dW.tobytes() + self.X0.tobytes()


def concat_bundles(bundles: Sequence[NoiseBundle]) -> NoiseBundle:
    first = bundles[0]
    return NoiseBundle(
        first.seed, first.grid,
        np.concatenate([b.dB for b in bundles]), np.concatenate([b.dW for b in bundles]),
        np.concatenate([b.X0 for b in bundles]), np.concatenate([b.replicas for b in bundles]),
    )


def generate_noise(seed: int, n: int, grid: TimeGrid, spec: ModelSpec, replicas: int = 1, *,
                   first_replica: int = 0, x0=None, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> NoiseBundle:
    """Draw `replicas` independent bundles for an `n`-player game.

    Replica ``r`` uses counters addressed by ``first_replica + r``, so bundles
    drawn in pieces concatenate to the bundle drawn at once. Initial states
    are i.i.d. from the model's initial law unless `x0` (shape ``(n, d)`` or
    ``(R, n, d)``) is supplied.
    """
    if int(n) < 1:
        raise ConfigurationError("need at least one player")
    if int(replicas) < 1:
        raise ConfigurationError("need at least one replica")
    n, R, d, N = int(n), int(replicas), spec.dim, grid.n_steps
    need = 8 * R * (n * N * d + N * d + n * d)
    if need > memory_budget:
        raise ResourceError(f"noise bundle needs {need} bytes, budget is {memory_budget}")
    sqdt = np.sqrt(grid.dt)
    dB = np.empty((R, N, d))
    dW = np.empty((R, n, N, d))
    X0 = np.empty((R, n, d))
    ids = np.arange(first_replica, first_replica + R)
    for k, r in enumerate(ids):
        dB[k] = streams.normal_block(seed, streams.TAG_COMMON, r, 1, N * d).reshape(N, d) * sqdt
        dW[k] = streams.normal_block(seed, streams.TAG_IDIOSYNCRATIC, r, n, N * d).reshape(n, N, d) * sqdt
        if x0 is None:
            X0[k] = spec.initial_law.from_normals(streams.normal_block(seed, streams.TAG_INITIAL, r, n, d))
    if x0 is not None:
        X0[:] = np.broadcast_to(np.asarray(x0, dtype=float), X0.shape)
    return NoiseBundle(int(seed), grid, dB, dW, X0, ids)


# ---------------------------------------------------------------------------
# common-noise scenarios


@dataclass(frozen=True, eq=False)
class CommonScenario:
    """One realization of the common signal: an id, a ``B`` path and a weight.

    ``randomization`` indexes extra common randomness beyond ``B`` (several
    fixed points attached to the same path).
    """

    scenario_id: int
    dB: np.ndarray
    weight: float = 1.0
    randomization: Optional[int] = None

    def __post_init__(self):
        dB = np.asarray(self.dB, dtype=float)
        if dB.ndim == 1:
            dB = dB[:, None]
        object.__setattr__(self, "dB", dB)

    @property
    def path(self) -> np.ndarray:
        """``B`` at the grid nodes, ``B_0 = 0``."""
        return np.concatenate([np.zeros((1, self.dB.shape[1])), np.cumsum(self.dB, axis=0)])

    @property
    def n_steps(self) -> int:
        return self.dB.shape[0]


def sample_scenarios(count: int, grid: TimeGrid, dim: int, seed: int) -> list:
    """Equally weighted Brownian scenarios drawn from the counter-based stream."""
    if int(count) < 1:
        raise ConfigurationError("need at least one scenario")
    sqdt = np.sqrt(grid.dt)
    out = []
    for s in range(int(count)):
        dB = streams.normal_block(seed, streams.TAG_SCENARIO, s, 1, grid.n_steps * dim).reshape(grid.n_steps, dim)
        out.append(CommonScenario(s, dB * sqdt, 1.0 / count))
    return out


def zero_scenario(grid: TimeGrid, dim: int, scenario_id: int = 0) -> CommonScenario:
    return CommonScenario(scenario_id, np.zeros((grid.n_steps, dim)), 1.0)


def _resolve_scenarios(scenario, R: int, N: int):
    """Per-replica scenario ids and common increments (or None)."""
    if scenario is None:
        return None, None
    if isinstance(scenario, CommonScenario):
        scenario = [scenario] * R
    scenario = list(scenario)
    if len(scenario) != R:
        raise ConfigurationError(f"{len(scenario)} scenarios supplied for {R} replicas")
    if any(s.n_steps != N for s in scenario):
        raise DomainError("scenario path length does not match the time grid")
    ids = np.array([s.scenario_id for s in scenario])
    dB = np.stack([s.dB for s in scenario])
    return ids, dB


def assign_scenarios(scenarios: Sequence[CommonScenario], n_replicas: int) -> list:
    """Round-robin assignment of scenarios to replicas."""
    return [scenarios[r % len(scenarios)] for r in range(n_replicas)]


# ---------------------------------------------------------------------------
# policies


class PolicyKind(str, Enum):
    MARKOVIAN = "Markovian"
    SEMI_MARKOV = "SemiMarkov"
    S_CLOSED_LOOP = "SClosedLoop"
    CONSTANT = "ConstantAction"
    TABLE = "Table"


@dataclass
class PolicyContext:
    """What a policy may read at node ``j``: histories truncated at ``j``."""

    node: int
    time: float
    history: np.ndarray
    common_history: np.ndarray
    players: np.ndarray
    scenario_ids: Optional[np.ndarray]
    measure_at: Callable

    @property
    def states(self) -> np.ndarray:
        """All players' current states, shape (R, n, d)."""
        return self.history[:, :, -1]

    @property
    def own(self) -> np.ndarray:
        """Current states of the evaluated players, shape (R, P, d)."""
        return self.history[:, self.players, -1]

    def measure(self, node: Optional[int] = None):
        node = self.node if node is None else node
        if node > self.node:
            raise DomainError("policies cannot read future measures")
        return self.measure_at(node)


class Policy:
    """Maps a `PolicyContext` to action indices of shape (R, P)."""

    def __init__(self, kind, evaluator: Callable, name: str = ""):
        self.kind = PolicyKind(kind)
        self.evaluator = evaluator
        self.name = name or self.kind.value

    def __call__(self, ctx: PolicyContext) -> np.ndarray:
        idx = np.asarray(self.evaluator(ctx))
        R, P = ctx.history.shape[0], ctx.players.size
        return np.broadcast_to(idx, (R, P)).astype(np.int64)

    def __repr__(self):
        return f"Policy({self.kind.value}, {self.name!r})"


def constant_action(index: int) -> Policy:
    index = int(index)
    return Policy(PolicyKind.CONSTANT, lambda ctx: np.full((ctx.history.shape[0], ctx.players.size), index),
                  name=f"constant[{index}]")


def markovian(fn: Callable, name: str = "") -> Policy:
    """``fn(t, states, players) -> indices``; reads every player's current state."""
    return Policy(PolicyKind.MARKOVIAN, lambda ctx: fn(ctx.time, ctx.states, ctx.players), name)


def semi_markov(fn: Callable, name: str = "") -> Policy:
    """``fn(t, own_states, ctx) -> indices``; own current state plus common histories."""
    return Policy(PolicyKind.SEMI_MARKOV, lambda ctx: fn(ctx.time, ctx.own, ctx), name)


def nearest_action(spec: ModelSpec, values) -> np.ndarray:
    """Index of the grid action nearest to each requested action vector."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1:] != (spec.action_dim,):
        values = values[..., None]
    grid = spec.actions[:, 0]
    if spec.action_dim == 1 and grid.size > 1 and np.all(np.diff(grid) > 0):
        # sorted scalar grid: compare the two bracketing actions, ties to the lower index
        v = values[..., 0]
        hi = np.clip(np.searchsorted(grid, v, side="left"), 1, grid.size - 1)
        return hi - (np.abs(v - grid[hi - 1]) <= np.abs(v - grid[hi]))
    dist = np.linalg.norm(values[..., None, :] - spec.actions, axis=-1)
    return np.argmin(dist, axis=-1)


class TablePolicy(Policy):
    """Lookup over (node, nearest own-state bin, scenario id).

    Parameters
    ----------
    tables : dict
        ``scenario_id -> int array (N_t, G)``. A single table under key
        ``None`` ignores the scenario.
    grid : StateGrid
    """

    def __init__(self, tables: dict, grid: StateGrid, kind=PolicyKind.S_CLOSED_LOOP, name: str = ""):
        self.tables = {k: np.asarray(v, dtype=np.int64) for k, v in tables.items()}
        self.grid = grid
        super().__init__(kind, self._lookup, name or "table")

    def _lookup(self, ctx: PolicyContext) -> np.ndarray:
        bins = self.grid.nearest(ctx.own)
        if None in self.tables and len(self.tables) == 1:
            return self.tables[None][ctx.node][bins]
        if ctx.scenario_ids is None:
            raise ConfigurationError("scenario-indexed table policy needs scenario histories")
        out = np.empty(bins.shape, dtype=np.int64)
        for sid in np.unique(ctx.scenario_ids):
            if int(sid) not in self.tables:
                raise DomainError(f"scenario {sid} has no policy table")
            rows = ctx.scenario_ids == sid
            out[rows] = self.tables[int(sid)][ctx.node][bins[rows]]
        return out

    def action_at(self, node: int, x, scenario_id=None) -> np.ndarray:
        table = self.tables[None if None in self.tables else scenario_id]
        return table[node][self.grid.nearest(np.asarray(x, dtype=float))]


def _groups(policies):
    groups = {}
    for i, pol in enumerate(policies):
        groups.setdefault(id(pol), (pol, []))[1].append(i)
    return [(pol, np.asarray(idx)) for pol, idx in groups.values()]


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """Simulated states (R, n, N_t+1, d), action indices (R, n, N_t) and noise."""

    grid: TimeGrid
    states: np.ndarray
    actions: np.ndarray
    dB: np.ndarray
    dW: np.ndarray
    scenario_ids: Optional[np.ndarray] = None
    environment: Optional[MeasureFlow] = None

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def n_replicas(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[-1]

    @property
    def common_path(self) -> np.ndarray:
        R, _, d = self.dB.shape
        return np.concatenate([np.zeros((R, 1, d)), np.cumsum(self.dB, axis=1)], axis=1)

    def measure(self, j: int) -> MeasureSummary:
        """Empirical measure of all players at node `j`, batched over replicas."""
        return MeasureSummary(self.states[:, :, j], check=False)

    def coefficient_measure(self, j: int):
        """Measure entering the coefficients at node `j`."""
        if self.environment is not None:
            return self.environment[j]
        return self.measure(j)

    def measure_flow(self, replica: int = 0) -> MeasureFlow:
        return MeasureFlow(self.grid, tuple(MeasureSummary(self.states[replica, :, j], check=False)
                                            for j in range(self.grid.n_steps + 1)))

    def tobytes(self) -> bytes:
        return self.states.tobytes() + self.actions.tobytes()


def _simulate(spec: ModelSpec, grid: TimeGrid, X0, dW, dB, policies, scenario_ids=None, environment=None):
    R, n, d = X0.shape
    N, dt = grid.n_steps, grid.dt
    if len(policies) != n:
        raise ConfigurationError(f"{len(policies)} policies for {n} players")
    times = grid.times
    states = np.empty((R, n, N + 1, d))
    states[:, :, 0] = X0
    actions = np.empty((R, n, N), dtype=np.int64)
    idio = dW @ spec.sigma.T
    common = dB @ spec.gamma.T
    B = np.concatenate([np.zeros((R, 1, d)), np.cumsum(dB, axis=1)], axis=1)
    groups = _groups(policies)
    for pol, _ in groups:
        if pol.kind in (PolicyKind.S_CLOSED_LOOP,) and scenario_ids is None:
            raise ConfigurationError("S-closed-loop policies need a scenario history")

    if environment is not None:
        def measure_at(l):
            return environment[l]
    else:
        def measure_at(l):
            return MeasureSummary(states[:, :, l], check=False)

    for j in range(N):
        x = states[:, :, j]
        m = measure_at(j)
        for pol, idx in groups:
            ctx = PolicyContext(j, float(times[j]), states[:, :, :j + 1], B[:, :j + 1], idx, scenario_ids, measure_at)
            chosen = pol(ctx)
            if np.any(chosen < 0) or np.any(chosen >= spec.n_actions):
                raise DomainError(f"policy {pol!r} returned an action index outside [0, {spec.n_actions})")
            actions[:, idx, j] = chosen
        a = spec.actions[actions[:, :, j]]
        drift = spec.drift(float(times[j]), x, m, a)
        nxt = x + drift * dt + idio[:, :, j] + common[:, None, j]
        bad = ~np.isfinite(nxt) | (np.abs(nxt) > DIVERGENCE_BOUND)
        if np.any(bad):
            r, i = np.argwhere(np.any(bad, axis=-1))[0]
            raise DivergenceError(
                f"state of player {i} left the finite range at step {j + 1} (replica {r})",
                player=int(i), step=j + 1, replica=int(r),
            )
        states[:, :, j + 1] = nxt
    return TrajectoryBundle(grid, states, actions, dB, dW, scenario_ids, environment)


def simulate_nplayer(spec: ModelSpec, noise: NoiseBundle, policies: Sequence[Policy], scenario=None) -> TrajectoryBundle:
    """Euler-Maruyama for the n-player system.

    Policies are evaluated at the left endpoint of each step after the
    empirical measure of all ``n`` players at that node is formed. When a
    `scenario` (one `CommonScenario`, or one per replica) is given, its path
    replaces the bundle's common increments and its id is exposed to
    S-closed-loop policies.
    """
    ids, dB = _resolve_scenarios(scenario, noise.n_replicas, noise.grid.n_steps)
    if dB is None:
        dB = noise.dB
    return _simulate(spec, noise.grid, noise.X0, noise.dW, dB, list(policies), ids)


def simulate_deviation(spec: ModelSpec, noise: NoiseBundle, policies: Sequence[Policy], k: int,
                       beta: Policy, scenario=None) -> TrajectoryBundle:
    """Same bundle, same scheme, with player `k` switched to `beta`."""
    policies = list(policies)
    if not 0 <= k < len(policies):
        raise DomainError(f"player index {k} outside [0, {len(policies)})")
    policies[k] = beta
    return simulate_nplayer(spec, noise, policies, scenario)


def simulate_exogenous_mkv(spec: ModelSpec, scenario: CommonScenario, mu_flow: MeasureFlow, policy: Policy,
                           m_particles: int, seed: int, *, x0=None, noise: Optional[NoiseBundle] = None) -> TrajectoryBundle:
    """Particles driven by a fixed environment flow and a shared common path.

    Every particle sees the supplied ``mu_flow`` in the coefficients and the
    scenario's ``B``; idiosyncratic noises are independent. The returned cloud
    estimates the conditional law given ``(mu, B)``. A single-replica `noise`
    bundle overrides the generated idiosyncratic increments and initial states.
    """
    if policy.kind == PolicyKind.MARKOVIAN:
        raise ConfigurationError("exogenous simulation needs a semi-Markov or table policy")
    grid = mu_flow.grid
    if scenario.n_steps != grid.n_steps:
        raise DomainError("scenario and flow use different time grids")
    if noise is None:
        noise = generate_noise(seed, m_particles, grid, spec, x0=x0)
    elif noise.n != m_particles or noise.n_replicas != 1:
        raise ConfigurationError("override bundle must hold one replica of m_particles players")
    ids = np.array([scenario.scenario_id])
    return _simulate(spec, grid, noise.X0, noise.dW, scenario.dB[None], [policy] * m_particles, ids, mu_flow)


# ---------------------------------------------------------------------------
# objectives


def objective_paths(spec: ModelSpec, traj: TrajectoryBundle) -> np.ndarray:
    """Left-Riemann objective of every player in every replica, shape (R, n)."""
    grid = traj.grid
    times = grid.times
    total = np.zeros(traj.states.shape[:2])
    for j in range(grid.n_steps):
        a = spec.actions[traj.actions[:, :, j]]
        f = spec.running_cost(float(times[j]), traj.states[:, :, j], traj.coefficient_measure(j), a)
        total += np.broadcast_to(f, total.shape) * grid.dt
    g = spec.terminal_cost(traj.states[:, :, -1], traj.coefficient_measure(grid.n_steps))
    return total + np.broadcast_to(g, total.shape)


def objective(spec: ModelSpec, traj: TrajectoryBundle, i: int) -> float:
    """Objective of player `i`, averaged over the bundle's replicas."""
    return float(np.mean(objective_paths(spec, traj)[:, i]))


def ensemble_objective(spec: ModelSpec, traj: TrajectoryBundle, i: int):
    """Mean and standard error of player `i`'s objective across replicas."""
    vals = objective_paths(spec, traj)[:, i]
    se = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return float(np.mean(vals)), se


def sup_norm_moment(traj: TrajectoryBundle, q: float) -> float:
    """``(1/n) sum_k E ||X^k||_T^q`` with the sup norm over nodes."""
    sup = np.max(np.linalg.norm(traj.states, axis=-1), axis=-1)
    return float(np.mean(sup ** q if q else np.ones_like(sup)))


# ---------------------------------------------------------------------------
# export

TRAJ_MAGIC = b"MFGT"
_TRAJ_HEADER = struct.Struct("<4sIIIIId")


def write_trajectory(traj: TrajectoryBundle, path) -> None:
    """Binary layout: little-endian header ``magic, version, n, N_t, d, R, dt``
    followed by the float64 states in row-major (R, n, N_t+1, d) order."""
    header = _TRAJ_HEADER.pack(TRAJ_MAGIC, 1, traj.n, traj.grid.n_steps, traj.dim, traj.n_replicas, traj.grid.dt)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())


def read_trajectory(path):
    """Inverse of `write_trajectory`: returns ``(header dict, states array)``."""
    raw = Path(path).read_bytes()
    magic, version, n, N, d, R, dt = _TRAJ_HEADER.unpack_from(raw)
    if magic != TRAJ_MAGIC:
        raise DomainError("not a trajectory file")
    states = np.frombuffer(raw, dtype="<f8", offset=_TRAJ_HEADER.size).reshape(R, n, N + 1, d)
    return {"version": version, "n": n, "n_steps": N, "dim": d, "replicas": R, "dt": dt}, states


def write_moments_csv(traj: TrajectoryBundle, path) -> None:
    """Per replica and node: time, empirical mean per coordinate, second moment, variance."""
    d = traj.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "node", "time"] + [f"mean_{k}" for k in range(d)] + ["second_moment", "variance"])
        times = traj.grid.times
        for r in range(traj.n_replicas):
            for j in range(traj.grid.n_steps + 1):
                m = MeasureSummary(traj.states[r, :, j], check=False)
                mean = m.mean()[0]
                w.writerow([r, j, repr(float(times[j]))] + [repr(float(v)) for v in mean]
                           + [repr(float(m.moment(2)[0])), repr(float(m.variance()[0]))])
