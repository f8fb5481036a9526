"""Nash gaps of n-player profiles and the equilibria built from a mean field solution.

Best responses are computed in a frozen environment: the baseline profile is
simulated once, the other players' paths are held fixed, and the deviating
player's table policy is optimized by dynamic programming against them. The
deviator's own particle still enters the empirical measure with weight 1/n at
every candidate state. The resulting policy is then scored by re-simulating
the full system on the same noise, so the reported gap is a lower bound on
the supremum over the deviation class.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dp
from .exceptions import ConfigurationError, DomainError
from .grids import StateGrid, TimeGrid
from .measures import MeasureSummary, SelfInsertedMeasure
from .model import ModelSpec
from .sde import (NoiseBundle, Policy, PolicyKind, TablePolicy, _resolve_scenarios, concat_bundles,
                  objective_paths, simulate_deviation, simulate_nplayer)

DEVIATION_CLASSES = ("Markovian", "SClosedLoop")
GAP_MODES = ("per_player_max", "averaged")


def _ensemble(noise_ensemble) -> NoiseBundle:
    if isinstance(noise_ensemble, NoiseBundle):
        return noise_ensemble
    bundles = list(noise_ensemble)
    if not bundles:
        raise ConfigurationError("noise ensemble is empty")
    return concat_bundles(bundles)


def _class(policy_class) -> PolicyKind:
    try:
        kind = PolicyKind(policy_class)
    except ValueError:
        raise ConfigurationError(f"deviation class must be one of {DEVIATION_CLASSES}") from None
    if kind not in (PolicyKind.MARKOVIAN, PolicyKind.S_CLOSED_LOOP):
        raise ConfigurationError(f"deviation class must be one of {DEVIATION_CLASSES}")
    return kind


# ---------------------------------------------------------------------------
# constructed equilibria


def constructed_equilibrium(sol, n: int, scenario_ids: Optional[Sequence[int]] = None) -> list:
    """``n`` references to one S-closed-loop policy reading ``alpha*(t, own state, s)``.

    Raises `DomainError` when a requested scenario id has no solution.
    """
    if int(n) < 1:
        raise ConfigurationError("need at least one player")
    for sid in scenario_ids or ():
        if int(sid) not in sol.solutions:
            raise DomainError(f"scenario {sid} is not part of the solution")
    policy = sol.policy_table(PolicyKind.S_CLOSED_LOOP)
    return [policy] * int(n)


# ---------------------------------------------------------------------------
# frozen environment


@dataclass
class _Branch:
    weight: float
    reward: np.ndarray    # (N, G, A)
    drift: np.ndarray     # (N, G, A, d)
    terminal: np.ndarray  # (G,)
    shifts: np.ndarray    # (N, d)


class FrozenEnvironment:
    """Player `k`'s control problem with everyone else's baseline paths held fixed.

    Replicas are grouped by scenario id (one group when the ensemble carries
    no scenarios). Within a group, replicas sharing a common path form one
    branch whose coefficients are averaged over its replicas; a table for the
    group maximizes the branch-weighted action values.
    """

    def __init__(self, spec: ModelSpec, noise, policies: Sequence[Policy], k: int, grid: StateGrid,
                 scenarios=None, quad_points: int = 7):
        self.spec = spec
        self.noise = _ensemble(noise)
        self.policies = list(policies)
        self.k = int(k)
        self.grid = grid
        self.quad_points = int(quad_points)
        self.scenarios = scenarios
        n = self.noise.n
        if len(self.policies) != n:
            raise ConfigurationError(f"{len(self.policies)} policies for {n} players")
        if not 0 <= self.k < n:
            raise DomainError(f"player index {k} outside [0, {n})")
        self.tgrid: TimeGrid = self.noise.grid
        self.baseline = simulate_nplayer(spec, self.noise, self.policies, scenarios)
        ids = self.baseline.scenario_ids
        self.group_ids = [None] if ids is None else sorted({int(s) for s in ids})
        self.groups = {}
        for gid in self.group_ids:
            rows = np.arange(self.noise.n_replicas) if gid is None else np.flatnonzero(ids == gid)
            self.groups[gid] = self._branches(rows)

    # -- construction -------------------------------------------------------

    def _branches(self, rows):
        shifts = self.baseline.dB[rows] @ self.spec.gamma.T
        _, inverse = np.unique(shifts.reshape(len(rows), -1), axis=0, return_inverse=True)
        inverse = np.asarray(inverse).ravel()
        out = []
        for b in range(inverse.max() + 1):
            members = rows[inverse == b]
            out.append(_Branch(members.size / rows.size, *self._coefficients(members), shifts[inverse == b][0]))
        return out

    def _coefficients(self, rows):
        spec, grid, tgrid = self.spec, self.grid, self.tgrid
        n, d = self.noise.n, spec.dim
        others = np.delete(np.arange(n), self.k)
        x = grid.points
        G, A, N = grid.size, spec.n_actions, tgrid.n_steps
        reward = np.empty((N, G, A))
        drift = np.empty((N, G, A, d))
        times = tgrid.times
        R = rows.size

        def env(j):
            if n == 1:
                return SelfInsertedMeasure(MeasureSummary(np.zeros((R, 1, d)), check=False), x, 1.0)
            base = MeasureSummary(self.baseline.states[rows][:, others, j], check=False)
            return SelfInsertedMeasure(base, x, 1.0 / n)

        for j in range(N):
            m = env(j)
            t = float(times[j])
            for i, a in enumerate(spec.actions):
                f = np.broadcast_to(spec.running_cost(t, x, m, a), (R, G))
                b = np.broadcast_to(spec.drift(t, x, m, a), (R, G, d))
                reward[j, :, i] = f.mean(axis=0)
                drift[j, :, i] = b.mean(axis=0)
        terminal = np.broadcast_to(spec.terminal_cost(x, env(N)), (R, G)).mean(axis=0)
        return reward, drift, terminal

    # -- dynamic programming ------------------------------------------------

    def _run(self, gid, policy=None, keep_q=False):
        branches = [(br.weight, (lambda j, r=br.reward: r[j]), (lambda j, b=br.drift: b[j]), br.shifts)
                    for br in self.groups[gid]]
        terminal = sum(br.weight * br.terminal for br in self.groups[gid])
        return dp.backward_mixture(self.grid, self.tgrid, branches, terminal, self.spec.sigma,
                                   self.quad_points, policy, keep_q=keep_q)

    def solve(self, gid=None) -> dp.BackwardResult:
        """Optimal table against the frozen environment of group `gid`."""
        return self._run(gid, keep_q=True)

    def evaluate(self, table, gid=None) -> np.ndarray:
        """Value table of a fixed deviator table in group `gid`."""
        return self._run(gid, np.asarray(table, dtype=np.int64)).value

    def initial_histogram(self, gid=None) -> np.ndarray:
        """The deviator's initial states in the group, projected on the grid."""
        ids = self.baseline.scenario_ids
        rows = np.arange(self.noise.n_replicas) if gid is None else np.flatnonzero(ids == gid)
        x0 = self.baseline.states[rows, self.k, 0]
        return self.grid.scatter(np.full(rows.size, 1.0 / rows.size), x0)

    def group_weights(self) -> dict:
        ids = self.baseline.scenario_ids
        if ids is None:
            return {None: 1.0}
        return {g: float(np.mean(ids == g)) for g in self.group_ids}

    def reference_means(self):
        """Per group and node: the average empirical mean (groups, N+1, d) and the
        pooled within-group variance per coordinate (N+1,)."""
        ids = self.baseline.scenario_ids
        means = self.baseline.states.mean(axis=1)               # (R, N+1, d)
        refs, resid = [], []
        for gid in self.group_ids:
            rows = slice(None) if gid is None else ids == gid
            ref = means[rows].mean(axis=0)
            refs.append(ref)
            resid.append(means[rows] - ref)
        resid = np.concatenate(resid)
        dof = max(resid.shape[0] - len(self.group_ids), 1)
        return np.stack(refs), np.sum(resid ** 2, axis=(0, 2)) / (dof * self.spec.dim)


class ScenarioInferencePolicy(Policy):
    """Markovian policy that weighs per-scenario action values by a posterior.

    The current empirical mean of all players is compared with each
    scenario's reference mean under a Gaussian likelihood whose variance is
    the within-scenario spread of that mean in the baseline ensemble. The
    action maximizes the posterior-weighted action values at the player's
    own grid bin. Only current states are read.

    Parameters
    ----------
    q : ndarray, shape (S, N, G, A)
        Per-scenario action values.
    weights : ndarray, shape (S,)
    references : ndarray, shape (S, N+1, d)
    variances : ndarray, shape (N+1,)
    """

    def __init__(self, q, weights, references, variances, grid: StateGrid, name: str = "markov-posterior"):
        self.q = np.asarray(q)
        self.log_prior = np.log(np.asarray(weights, dtype=float))
        self.references = np.asarray(references)
        self.variances = np.maximum(np.asarray(variances, dtype=float), 1e-300)
        self.grid = grid
        super().__init__(PolicyKind.MARKOVIAN, self._lookup, name)

    def posterior(self, node: int, states) -> np.ndarray:
        """Scenario posterior (R, S) given current states (R, n, d)."""
        mean = np.asarray(states).mean(axis=1)
        sq = np.sum((mean[:, None, :] - self.references[None, :, node, :]) ** 2, axis=-1)
        logp = self.log_prior[None, :] - 0.5 * sq / self.variances[node]
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        return p / p.sum(axis=1, keepdims=True)

    def _lookup(self, ctx) -> np.ndarray:
        bins = self.grid.nearest(ctx.own)                       # (R, P)
        post = self.posterior(ctx.node, ctx.states)             # (R, S)
        q = self.q[:, ctx.node][:, bins]                        # (S, R, P, A)
        mixed = np.einsum("rs,srpa->rpa", post, q)
        return dp.argmax_lowest(mixed)


# ---------------------------------------------------------------------------
# best responses and gaps


@dataclass
class BestResponse:
    policy: Policy
    value: float
    se: float
    baseline: float
    baseline_se: float
    gap: float
    gap_se: float
    dp_value: float
    tables: dict = field(repr=False, default_factory=dict)


def _deviator_tables(env: FrozenEnvironment, kind: PolicyKind):
    tables, qs, dp_value = {}, [], 0.0
    weights = env.group_weights()
    for gid in env.group_ids:
        res = env.solve(gid)
        tables[gid] = res.policy
        qs.append(res.q)
        dp_value += weights[gid] * float(res.value[0] @ env.initial_histogram(gid))
    if kind == PolicyKind.S_CLOSED_LOOP:
        return TablePolicy(tables, env.grid, kind, name="best-response[SClosedLoop]"), tables, dp_value
    if len(env.group_ids) == 1:
        # one common path: a table over (node, own state) is Markovian
        only = {None: tables[env.group_ids[0]]}
        return TablePolicy(only, env.grid, kind, name="best-response[Markovian]"), tables, dp_value
    refs, var = env.reference_means()
    policy = ScenarioInferencePolicy(np.stack(qs), [weights[g] for g in env.group_ids], refs, var, env.grid)
    return policy, tables, dp_value


def best_response(spec: ModelSpec, noise_ensemble, policies: Sequence[Policy], k: int, policy_class,
                  grid: StateGrid, *, scenarios=None, quad_points: int = 7) -> BestResponse:
    """Approximate best response of player `k` within a deviation class.

    Parameters
    ----------
    noise_ensemble : NoiseBundle or list of NoiseBundle
    policy_class : {"Markovian", "SClosedLoop"}
        S-closed-loop deviators read their own state and the scenario id;
        Markovian deviators read all current states and infer the scenario.
    scenarios : CommonScenario or sequence, optional
        Common paths injected per replica, as in `simulate_nplayer`.

    Returns
    -------
    BestResponse
        The DP policy, its re-simulated value and standard error, the
        baseline value and the paired gap estimate. The gap is a lower bound
        on the deviation supremum.
    """
    kind = _class(policy_class)
    noise = _ensemble(noise_ensemble)
    if kind == PolicyKind.S_CLOSED_LOOP and scenarios is None:
        raise ConfigurationError("S-closed-loop deviations need scenario histories")
    env = FrozenEnvironment(spec, noise, policies, k, grid, scenarios, quad_points)
    policy, tables, dp_value = _deviator_tables(env, kind)
    return _score(spec, env, policy, tables, dp_value)


def _score(spec, env, policy, tables, dp_value) -> BestResponse:
    base = objective_paths(spec, env.baseline)[:, env.k]
    dev_traj = simulate_deviation(spec, env.noise, env.policies, env.k, policy, env.scenarios)
    dev = objective_paths(spec, dev_traj)[:, env.k]
    R = base.size
    se = (lambda v: float(np.std(v, ddof=1) / np.sqrt(R)) if R > 1 else float("nan"))
    return BestResponse(policy, float(dev.mean()), se(dev), float(base.mean()), se(base),
                        float(np.mean(dev - base)), se(dev - base), dp_value, tables)


def random_search_bound(spec: ModelSpec, noise_ensemble, policies: Sequence[Policy], k: int, grid: StateGrid,
                        start: dict, *, scenarios=None, trials: int = 8, rate: float = 0.1, seed: int = 0):
    """Best re-simulated value over random perturbations of a table policy.

    Each trial moves a fraction `rate` of the entries of every table in
    `start` by one action index. Returns ``(value, se, gap, gap_se)`` of the
    best trial, a second lower bound beside the DP one.
    """
    noise = _ensemble(noise_ensemble)
    gen = np.random.default_rng(np.random.SeedSequence([int(seed), int(k)]))
    A = spec.n_actions
    kind = PolicyKind.S_CLOSED_LOOP if None not in start else PolicyKind.MARKOVIAN
    base = objective_paths(spec, simulate_nplayer(spec, noise, policies, scenarios))[:, k]
    best = None
    for _ in range(int(trials)):
        tables = {}
        for key, tab in start.items():
            step = gen.choice([-1, 1], size=tab.shape) * (gen.random(tab.shape) < rate)
            tables[key] = np.clip(tab + step, 0, A - 1)
        pol = TablePolicy(tables, grid, kind, name="random-search")
        dev = objective_paths(spec, simulate_deviation(spec, noise, policies, k, pol, scenarios))[:, k]
        diff = dev - base
        cand = (float(dev.mean()), float(np.std(dev, ddof=1) / np.sqrt(dev.size)),
                float(diff.mean()), float(np.std(diff, ddof=1) / np.sqrt(diff.size)))
        if best is None or cand[0] > best[0]:
            best = cand
    return best


@dataclass
class GapReport:
    """Per-player baseline and best-response values with the resulting gaps.

    ``gap`` follows ``mode``: the largest per-player gap, or the average of
    the per-player gaps. Gaps are lower bounds on the deviation supremum.
    """

    n: int
    mode: str
    policy_class: str
    players: list
    baseline: list
    baseline_se: list
    best_response: list
    best_response_se: list
    gaps: list
    gap_ses: list
    gap: float
    gap_se: float
    averaged_gap: float
    max_gap: float
    exchangeable: bool
    lower_bound: bool = True
    seed: Optional[int] = None

    def record(self, **extra) -> dict:
        out = asdict(self)
        out.update(extra)
        return out

    def to_jsonl(self, path, append: bool = True, **extra) -> None:
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.record(**extra), sort_keys=True) + "\n")

    def summary_row(self) -> list:
        return [self.n, self.policy_class, self.mode, self.seed, repr(self.gap), repr(self.gap_se)]


GAP_CSV_HEADER = ["n", "class", "mode", "seed", "gap", "se"]


def write_gap_csv(reports: Sequence[GapReport], path) -> None:
    """Summary table keyed by (n, class, mode, seed)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(GAP_CSV_HEADER)
        for r in sorted(reports, key=lambda r: (r.n, r.policy_class, r.mode, -1 if r.seed is None else r.seed)):
            w.writerow(r.summary_row())


def is_exchangeable(noise: NoiseBundle, policies: Sequence[Policy], x0_iid: bool = True) -> bool:
    """Identical policy objects and i.i.d. initial states."""
    return x0_iid and all(p is policies[0] for p in policies)


def nash_gap(spec: ModelSpec, noise_ensemble, policies: Sequence[Policy], mode: str = "per_player_max",
             policy_class="SClosedLoop", grid: StateGrid = None, *, scenarios=None,
             players: Optional[Sequence[int]] = None, exchangeable: Optional[bool] = None,
             quad_points: int = 7, seed: Optional[int] = None) -> GapReport:
    """Estimated epsilon of a profile.

    ``per_player_max`` reports ``max_i (BR_i - J_i)``; ``averaged`` reports
    ``(1/n) sum_i (BR_i - J_i)``. When the profile is exchangeable (one
    shared policy, i.i.d. initial states) the best response is computed for
    player 0 only and reused, which the report flags.
    """
    if mode not in GAP_MODES:
        raise ConfigurationError(f"mode must be one of {GAP_MODES}")
    if grid is None:
        raise ConfigurationError("a state grid is required for best responses")
    kind = _class(policy_class)
    noise = _ensemble(noise_ensemble)
    n = noise.n
    policies = list(policies)
    if exchangeable is None:
        exchangeable = is_exchangeable(noise, policies)
    if players is None:
        players = [0] if exchangeable else list(range(n))
    players = [int(i) for i in players]
    responses = {i: best_response(spec, noise, policies, i, kind, grid, scenarios=scenarios,
                                  quad_points=quad_points) for i in players}
    base = objective_paths(spec, simulate_nplayer(spec, noise, policies, scenarios))
    R = base.shape[0]
    base_mean = base.mean(axis=0)
    base_se = base.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.full(n, np.nan)
    if exchangeable:
        br = responses[players[0]]
        shown = list(range(n))
        gaps = [br.gap] * n
        gap_ses = [br.gap_se] * n
        brv = [br.value] * n
        brse = [br.se] * n
    else:
        shown = players
        gaps = [responses[i].gap for i in players]
        gap_ses = [responses[i].gap_se for i in players]
        brv = [responses[i].value for i in players]
        brse = [responses[i].se for i in players]
    top = int(np.argmax(gaps))
    avg = float(np.mean(gaps))
    avg_se = float(np.sqrt(np.sum(np.square(gap_ses))) / len(gap_ses))
    gap, gap_se = (gaps[top], gap_ses[top]) if mode == "per_player_max" else (avg, avg_se)
    return GapReport(
        n=n, mode=mode, policy_class=kind.value, players=shown,
        baseline=[float(base_mean[i]) for i in shown], baseline_se=[float(base_se[i]) for i in shown],
        best_response=brv, best_response_se=brse, gaps=gaps, gap_ses=gap_ses,
        gap=float(gap), gap_se=float(gap_se), averaged_gap=avg, max_gap=float(gaps[top]),
        exchangeable=bool(exchangeable), seed=seed,
    )


@dataclass
class InclusionReport:
    """Markovian versus S-closed-loop deviation gaps for one baseline.

    With ``conditional`` set, each scenario is treated as its own game whose
    common path is known to every player and the gaps are weight-averaged
    over scenarios.
    """

    markovian_gap: float
    markovian_se: float
    s_closed_loop_gap: float
    s_closed_loop_se: float
    difference: float
    combined_se: float
    passed: bool
    conditional: bool
    per_scenario: list = field(default_factory=list)

    def record(self) -> dict:
        return asdict(self)


def class_inclusion_experiment(spec: ModelSpec, noise_ensemble, policies: Sequence[Policy], grid: StateGrid, *,
                               scenarios=None, conditional: bool = True, k: float = 3.0,
                               quad_points: int = 7) -> InclusionReport:
    """Gaps under Markovian and S-closed-loop deviations for one baseline.

    Passes when ``gap(SClosedLoop) <= gap(Markovian) + k * combined SE``.

    In the conditional form every scenario's replicas are run as a separate
    game along that scenario's path. Otherwise a single game mixes all
    scenarios, and a Markovian deviator has to infer the scenario from the
    current states while an S-closed-loop deviator reads it directly. A
    scenario id fixes the whole common path, so that comparison also prices
    foresight of future common noise.
    """
    noise = _ensemble(noise_ensemble)
    if scenarios is None or not conditional:
        mk = nash_gap(spec, noise, policies, "per_player_max", PolicyKind.MARKOVIAN, grid,
                      scenarios=scenarios, quad_points=quad_points)
        sc = mk if scenarios is None else nash_gap(spec, noise, policies, "per_player_max",
                                                   PolicyKind.S_CLOSED_LOOP, grid, scenarios=scenarios,
                                                   quad_points=quad_points)
        parts = [(1.0, None, mk.gap, mk.gap_se, sc.gap, sc.gap_se)]
    else:
        _, scenario_list = _split_scenarios(scenarios, noise.n_replicas)
        parts = []
        for sid, (sc_obj, rows) in scenario_list.items():
            sub = noise.select(rows)
            mk = nash_gap(spec, sub, policies, "per_player_max", PolicyKind.MARKOVIAN, grid,
                          scenarios=sc_obj, quad_points=quad_points)
            sc = nash_gap(spec, sub, policies, "per_player_max", PolicyKind.S_CLOSED_LOOP, grid,
                          scenarios=sc_obj, quad_points=quad_points)
            parts.append((rows.size / noise.n_replicas, sid, mk.gap, mk.gap_se, sc.gap, sc.gap_se))
    w = np.array([p[0] for p in parts])
    mk_gap = float(np.sum(w * [p[2] for p in parts]))
    mk_se = float(np.sqrt(np.sum((w * [p[3] for p in parts]) ** 2)))
    sc_gap = float(np.sum(w * [p[4] for p in parts]))
    sc_se = float(np.sqrt(np.sum((w * [p[5] for p in parts]) ** 2)))
    combined = float(np.hypot(mk_se, sc_se))
    diff = sc_gap - mk_gap
    per = [{"scenario": p[1], "weight": p[0], "markovian_gap": p[2], "markovian_se": p[3],
            "s_closed_loop_gap": p[4], "s_closed_loop_se": p[5]} for p in parts]
    return InclusionReport(mk_gap, mk_se, sc_gap, sc_se, float(diff), combined, bool(diff <= k * combined),
                           bool(conditional and scenarios is not None), per)


def _split_scenarios(scenarios, R: int):
    """Map scenario id -> (scenario, replica rows) for a per-replica assignment."""
    if not isinstance(scenarios, (list, tuple)):
        scenarios = [scenarios] * R
    if len(scenarios) != R:
        raise ConfigurationError(f"{len(scenarios)} scenarios supplied for {R} replicas")
    out = {}
    for r, sc in enumerate(scenarios):
        out.setdefault(sc.scenario_id, (sc, []))[1].append(r)
    return scenarios, {k: (v[0], np.asarray(v[1])) for k, v in sorted(out.items())}
