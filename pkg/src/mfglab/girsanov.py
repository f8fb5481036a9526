"""Change of measure between a baseline profile and a single-player deviation.

Along a baseline trajectory, player ``k``'s drift under a deviation ``beta``
differs from the baseline drift by ``sigma Xi``. Reweighting by the
stochastic exponential ``zeta = exp(sum Xi.dW - 1/2 sum |Xi|^2 dt)`` turns
baseline expectations into expectations under the deviation. For Gaussian
Euler increments the identity holds exactly in discrete time.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigurationError, DivergenceError
from .grids import TimeGrid
from .model import ModelSpec
from .sde import (NoiseBundle, Policy, PolicyContext, TrajectoryBundle, generate_noise, simulate_deviation,
                  simulate_nplayer)

LOG_CLIP = 50.0


@dataclass(frozen=True, eq=False)
class GirsanovWeights:
    """Drift differences ``xi`` (..., N_t, d) and log weights (..., N_t+1)."""

    xi: np.ndarray
    log_zeta: np.ndarray
    clipped: bool = False

    @property
    def zeta(self) -> np.ndarray:
        return np.exp(self.log_zeta)

    @property
    def terminal(self) -> np.ndarray:
        return np.exp(self.log_zeta[..., -1])


def policy_actions(traj: TrajectoryBundle, players, beta: Policy) -> np.ndarray:
    """Action indices ``beta`` would take for `players` along the recorded paths, (R, P, N_t)."""
    players = np.atleast_1d(np.asarray(players))
    R, N = traj.n_replicas, traj.grid.n_steps
    B = traj.common_path
    times = traj.grid.times
    out = np.empty((R, players.size, N), dtype=np.int64)
    for j in range(N):
        ctx = PolicyContext(j, float(times[j]), traj.states[:, :, :j + 1], B[:, :j + 1], players,
                            traj.scenario_ids, traj.coefficient_measure)
        out[:, :, j] = beta(ctx)
    return out


def xi_process(spec: ModelSpec, traj: TrajectoryBundle, k, beta: Policy) -> np.ndarray:
    """``Xi_j = sigma^{-1} [b(beta action) - b(baseline action)]`` along the baseline.

    `k` may be one player or an array of players; the result has shape
    ``(R, N_t, d)`` or ``(R, P, N_t, d)`` accordingly.
    """
    scalar = np.ndim(k) == 0
    players = np.atleast_1d(np.asarray(k))
    alt = policy_actions(traj, players, beta)
    times = traj.grid.times
    R, N, d = traj.n_replicas, traj.grid.n_steps, traj.dim
    xi = np.empty((R, players.size, N, d))
    for j in range(N):
        x = traj.states[:, players, j]
        m = traj.coefficient_measure(j)
        t = float(times[j])
        diff = (spec.drift(t, x, m, spec.actions[alt[:, :, j]])
                - spec.drift(t, x, m, spec.actions[traj.actions[:, players, j]]))
        xi[:, :, j] = diff @ spec.sigma_inv.T
    return xi[:, 0] if scalar else xi


def zeta_process(xi, dW_k, dt: float, clip: float = LOG_CLIP) -> GirsanovWeights:
    """Log-Euler stochastic exponential.

    ``log zeta_{j+1} = log zeta_j + Xi_j . dW_j - |Xi_j|^2 dt / 2`` with
    ``log zeta_0 = 0``. Log weights beyond ``+-clip`` are clipped and the
    result is flagged.
    """
    xi = np.asarray(xi, dtype=float)
    dW_k = np.asarray(dW_k, dtype=float)
    if xi.shape != dW_k.shape:
        raise ConfigurationError(f"xi {xi.shape} and dW {dW_k.shape} differ in shape")
    with np.errstate(invalid="ignore", over="ignore"):
        inc = np.sum(xi * dW_k, axis=-1) - 0.5 * np.sum(xi * xi, axis=-1) * dt
    log_zeta = np.concatenate([np.zeros(inc.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    if not np.all(np.isfinite(log_zeta)):
        raise DivergenceError("non-finite log weight")
    clipped = bool(np.any(np.abs(log_zeta) > clip))
    if clipped:
        log_zeta = np.clip(log_zeta, -clip, clip)
    return GirsanovWeights(xi, log_zeta, clipped)


def weights_for(spec: ModelSpec, traj: TrajectoryBundle, k, beta: Policy) -> GirsanovWeights:
    """`xi_process` followed by `zeta_process` with the recorded increments of `k`."""
    xi = xi_process(spec, traj, k, beta)
    return zeta_process(xi, traj.dW[:, k], traj.grid.dt)


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    se = float(np.std(values, ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("nan")
    return float(np.mean(values)), se


# ---------------------------------------------------------------------------
# functionals


@dataclass(frozen=True)
class Functional:
    """A bounded path functional ``phi(traj, k, j) -> (R,)`` with a declared clip level.

    Values are clipped to ``[-clip, clip]`` on evaluation.
    """

    fn: Callable
    clip: float
    name: str = "functional"

    def __call__(self, traj: TrajectoryBundle, k: int, j: int) -> np.ndarray:
        return np.clip(np.asarray(self.fn(traj, k, j), dtype=float), -self.clip, self.clip)


def clipped_state(clip: float = 2.0, coordinate: int = 0) -> Functional:
    """``phi = clip(X^k_t[coordinate])``."""
    return Functional(lambda traj, k, j: traj.states[:, k, j, coordinate], float(clip), f"clipped_state[{clip}]")


def constant_functional(value: float = 1.0) -> Functional:
    return Functional(lambda traj, k, j: np.full(traj.n_replicas, float(value)), abs(float(value)) or 1.0,
                      "constant")


def reweighted_expectation(traj: TrajectoryBundle, weights: GirsanovWeights, functional, k: int,
                           node: Optional[int] = None):
    """``(1/R) sum_r zeta_t phi`` on the baseline, with its standard error."""
    node = traj.grid.n_steps if node is None else int(node)
    return _mean_se(weights.zeta[:, node] * functional(traj, k, node))


# ---------------------------------------------------------------------------
# equivalence check


@dataclass
class EquivalenceReport:
    left: float
    left_se: float
    right: float
    right_se: float
    difference: float
    combined_se: float
    allowance: float
    band: float
    passed: bool
    clip: float
    weights_clipped: bool
    dt: float
    node: int
    model: str = ""
    seed: Optional[int] = None

    def record(self, **extra) -> dict:
        out = asdict(self)
        out.update(extra)
        return out

    def to_jsonl(self, path, append: bool = True, **extra) -> None:
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.record(**extra), sort_keys=True) + "\n")


def _two_sides(spec, noise, policies, k, beta, functional, node, scenarios):
    base = simulate_nplayer(spec, noise, policies, scenarios)
    w = weights_for(spec, base, k, beta)
    node = base.grid.n_steps if node is None else int(node)
    left, left_se = reweighted_expectation(base, w, functional, k, node)
    dev = simulate_deviation(spec, noise, policies, k, beta, scenarios)
    right, right_se = _mean_se(functional(dev, k, node))
    return left, left_se, right, right_se, w.clipped, node


def calibrate_dt_constant(spec: ModelSpec, seed: int, n: int, grid: TimeGrid, replicas: int, policies_for,
                          k: int, beta: Policy, functional: Functional) -> float:
    """``C`` in the ``C dt`` allowance from a dt-halving pair.

    With ``D(dt) ~ C dt`` the two runs give ``C ~ 2 (|D(dt)| - |D(dt/2)|) / dt``,
    floored at zero. `policies_for(grid)` rebuilds the profile on a grid.
    """
    out = []
    for g in (grid, grid.refine(2)):
        noise = generate_noise(seed, n, g, spec, replicas)
        left, _, right, _, _, _ = _two_sides(spec, noise, policies_for(g), k, beta, functional, None, None)
        out.append(abs(left - right))
    return max(0.0, 2.0 * (out[0] - out[1]) / grid.dt)


def verify_measure_change(spec: ModelSpec, noise_ensemble, policies, k: int, beta: Policy, functional: Functional,
                          node: Optional[int] = None, *, scenarios=None, dt_constant: float = 0.0,
                          k_se: float = 3.0, seed: Optional[int] = None) -> EquivalenceReport:
    """Compare the reweighted baseline with a direct deviation on the same noise.

    LEFT is the ``zeta``-weighted baseline average of `functional` at `node`
    (terminal by default); RIGHT is its plain average under
    `simulate_deviation`. The check passes when
    ``|LEFT - RIGHT| <= k_se * sqrt(se_L^2 + se_R^2) + dt_constant * dt``.
    """
    if not isinstance(functional, Functional):
        raise ConfigurationError("functionals must declare a clip level; wrap them in Functional")
    noise = noise_ensemble if isinstance(noise_ensemble, NoiseBundle) else None
    if noise is None:
        from .sde import concat_bundles
        noise = concat_bundles(list(noise_ensemble))
    left, lse, right, rse, clipped, node = _two_sides(spec, noise, policies, k, beta, functional, node, scenarios)
    combined = float(np.hypot(lse, rse))
    allowance = float(dt_constant) * noise.grid.dt
    band = k_se * combined + allowance
    diff = left - right
    return EquivalenceReport(left, lse, right, rse, float(diff), combined, allowance, float(band),
                             bool(abs(diff) <= band), functional.clip, clipped, noise.grid.dt, node, spec.name, seed)


def entropy_estimate(weights, node: Optional[int] = None):
    """``(1/n) sum_k`` MC estimate of ``E[zeta log zeta]`` at `node`, with SE.

    `weights` is a list of per-player `GirsanovWeights` (each (R, N_t+1)) or
    a single one whose log weights carry a player axis (R, n, N_t+1).
    """
    if isinstance(weights, GirsanovWeights):
        logz = weights.log_zeta
        if logz.ndim == 2:
            logz = logz[:, None]
    else:
        logz = np.stack([w.log_zeta for w in weights], axis=1)
    node = logz.shape[-1] - 1 if node is None else int(node)
    lz = logz[..., node]
    per_replica = np.mean(np.exp(lz) * lz, axis=1)
    return _mean_se(per_replica)
