"""Generators and empirical Fokker-Planck residuals.

For a smooth compactly supported ``phi`` the empirical measure of an
n-player run satisfies

    <mu_t, phi> = <mu_0, phi> + int (1/n) sum_k L phi(X^k, a^k) dt
                  + int <mu, grad phi>^T gamma dB + M_t,

where ``M`` averages ``n`` orthogonal martingales, so ``E|M_T|^2 = O(1/n)``.
This module evaluates ``M`` on simulated paths, the analogous residual of
the Girsanov-reweighted flow ``nu``, and the scaling of both in ``n``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError
from .girsanov import GirsanovWeights, policy_actions, weights_for
from .grids import TimeGrid
from .model import ModelSpec
from .sde import TrajectoryBundle, generate_noise, simulate_nplayer


# ---------------------------------------------------------------------------
# test functions


def bump_profile(y):
    """``u(y) = exp(1 - 1/(1 - y^2))`` on ``|y| < 1``, zero elsewhere, with ``u'`` and ``u''``."""
    y = np.asarray(y, dtype=float)
    inside = np.abs(y) < 1.0
    ys = np.where(inside, y, 0.0)
    one = 1.0 - ys * ys
    u = np.where(inside, np.exp(1.0 - 1.0 / one), 0.0)
    h1 = -2.0 * ys / one ** 2
    dh1 = -2.0 / one ** 2 - 8.0 * ys * ys / one ** 3
    return u, np.where(inside, u * h1, 0.0), np.where(inside, u * (h1 * h1 + dh1), 0.0)


def _psi(t):
    """``exp(-1/t)`` for ``t > 0``, zero otherwise, with two derivatives."""
    pos = t > 0
    ts = np.where(pos, t, 1.0)
    v = np.where(pos, np.exp(-1.0 / ts), 0.0)
    return v, v / ts ** 2, v * (1.0 / ts ** 4 - 2.0 / ts ** 3)


def smooth_step(y):
    """``S(y)`` equal to 1 for ``y <= 0`` and 0 for ``y >= 1``, smooth in between, with ``S'`` and ``S''``."""
    y = np.asarray(y, dtype=float)
    a, da, dda = _psi(1.0 - y)
    b, db, ddb = _psi(y)
    da, dda = -da, dda
    d = a + b
    s = a / d
    num = da * b - a * db
    ds = num / d ** 2
    dnum = dda * b - a * ddb
    dd = da + db
    dds = (dnum * d - 2.0 * num * dd) / d ** 3
    return s, ds, dds


@dataclass(frozen=True)
class BumpTestFunction:
    """Radial bump ``phi(x) = u(|x - center| / radius)``.

    With ``core > 0`` the function equals 1 on the ball of radius `core` and
    rolls off smoothly to 0 over a further `radius`; the support radius is
    then ``core + radius``.
    """

    center: np.ndarray
    radius: float
    core: float = 0.0

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        if not np.all(np.isfinite(c)):
            raise ConfigurationError("bump center must be finite")
        if not (self.radius > 0):
            raise ConfigurationError("bump radius must be positive")
        if self.core < 0:
            raise ConfigurationError("plateau core must be nonnegative")
        object.__setattr__(self, "center", c)

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def support_radius(self) -> float:
        return self.core + self.radius

    def evaluate(self, x):
        """Value (...), gradient (..., d) and Hessian (..., d, d) at `x` (..., d)."""
        z = np.asarray(x, dtype=float) - self.center
        d = self.dim
        eye = np.eye(d)
        if self.core == 0.0:
            # in s = |z|^2 / r^2 the profile is smooth through the center
            r2 = self.radius ** 2
            s = np.sum(z * z, axis=-1) / r2
            inside = s < 1.0
            ss = np.where(inside, s, 0.0)
            one = 1.0 - ss
            val = np.where(inside, np.exp(1.0 - 1.0 / one), 0.0)
            h1 = -1.0 / one ** 2
            h2 = -2.0 / one ** 3
            gs = 2.0 * z / r2
            grad = (val * h1)[..., None] * gs
            hess = ((val * (h1 * h1 + h2))[..., None, None] * gs[..., :, None] * gs[..., None, :]
                    + (val * h1)[..., None, None] * (2.0 / r2) * eye)
            grad = np.where(inside[..., None], grad, 0.0)
            hess = np.where(inside[..., None, None], hess, 0.0)
            return val, grad, hess
        rho = np.linalg.norm(z, axis=-1)
        y = (rho - self.core) / self.radius
        s, ds, dds = smooth_step(y)
        ramp = (y > 0) & (y < 1)
        rs = np.where(ramp, rho, 1.0)
        e = z / rs[..., None]
        d1 = np.where(ramp, ds / self.radius, 0.0)
        d2 = np.where(ramp, dds / self.radius ** 2, 0.0)
        grad = d1[..., None] * e
        ee = e[..., :, None] * e[..., None, :]
        hess = d2[..., None, None] * ee + (d1 / rs)[..., None, None] * (eye - ee)
        return s, grad, hess

    def value(self, x):
        return self.evaluate(x)[0]

    def grad(self, x):
        return self.evaluate(x)[1]

    def hess(self, x):
        return self.evaluate(x)[2]

    def sup_grad(self, points: int = 20001) -> float:
        """``sup |grad phi|`` from the radial profile on a fine grid."""
        rho = np.linspace(0.0, self.support_radius, points)
        x = self.center + rho[:, None] * np.eye(self.dim)[0]
        return float(np.max(np.linalg.norm(self.grad(x), axis=-1)))


def truncation(m: float):
    """``h_m(y) = y u(y/m)`` with first and second derivatives."""
    m = float(m)
    if m <= 0:
        raise ConfigurationError("truncation level must be positive")

    def h(y):
        y = np.asarray(y, dtype=float)
        u, du, ddu = bump_profile(y / m)
        return y * u, u + (y / m) * du, (2.0 / m) * du + (y / m ** 2) * ddu

    return h


def identity_weight(y):
    y = np.asarray(y, dtype=float)
    return y, np.ones_like(y), np.zeros_like(y)


@dataclass(frozen=True)
class ProductTestFunction:
    """``psi(x, y) = h(y) phi(x)``; `h` returns value and two derivatives."""

    phi: object
    h: Callable = identity_weight

    def evaluate(self, x, y):
        """Dict of ``value, grad_x, hess_x, dy, dyy, dy_grad_x``."""
        v, g, H = self.phi.evaluate(x)
        hv, dh, ddh = self.h(y)
        return dict(value=hv * v, grad_x=hv[..., None] * g, hess_x=hv[..., None, None] * H,
                    dy=dh * v, dyy=ddh * v, dy_grad_x=dh[..., None] * g)


# ---------------------------------------------------------------------------
# generators


def _diffusion_term(spec: ModelSpec, hess):
    D = spec.sigma @ spec.sigma.T + spec.gamma @ spec.gamma.T
    return 0.5 * np.einsum("ij,...ij->...", D, hess)


def generator_apply(spec: ModelSpec, t: float, m, phi, x, a):
    """``L_{t,m} phi(x, a) = b . grad phi + 1/2 tr[(sigma sigma^T + gamma gamma^T) hess phi]``.

    `x` is (..., P, d) and `a` action vectors (..., P, k) following the drift
    convention; `phi` needs ``evaluate(x) -> (value, grad, hess)``.
    """
    x = np.asarray(x, dtype=float)
    _, g, H = phi.evaluate(x)
    b = spec.drift(t, x, m, np.asarray(a, dtype=float))
    return np.sum(b * g, axis=-1) + _diffusion_term(spec, H)


def extended_generator_apply(spec: ModelSpec, t: float, m, beta_action, psi: ProductTestFunction, x, y, a):
    """Generator of the pair ``(X, zeta)`` where ``zeta`` changes drift `a` into `beta_action`.

    ``grad_x psi . b(a) + 1/2 tr[(sigma sigma^T + gamma gamma^T) hess_x psi]
    + 1/2 y^2 psi_yy |sigma^{-1}(b(beta) - b(a))|^2 + y psi_y grad_x . (b(beta) - b(a))``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = psi.evaluate(x, y)
    b = spec.drift(t, x, m, np.asarray(a, dtype=float))
    db = spec.drift(t, x, m, np.asarray(beta_action, dtype=float)) - b
    xi = db @ spec.sigma_inv.T
    return (np.sum(p["grad_x"] * b, axis=-1) + _diffusion_term(spec, p["hess_x"])
            + 0.5 * y * y * p["dyy"] * np.sum(xi * xi, axis=-1)
            + y * np.sum(p["dy_grad_x"] * db, axis=-1))


# ---------------------------------------------------------------------------
# relaxed controls


def dirac_relaxed(actions, n_actions: int) -> np.ndarray:
    """One-hot probability vectors over the action grid, shape (..., A)."""
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros(actions.shape + (int(n_actions),))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


def relaxed_generator(spec: ModelSpec, t: float, m, phi, x, q):
    """``int_A L phi(x, a) q(da)`` for probability vectors `q` (..., P, A)."""
    q = np.asarray(q, dtype=float)
    total = np.zeros(q.shape[:-1])
    for i in np.flatnonzero(np.any(q != 0, axis=tuple(range(q.ndim - 1)))):
        a = np.broadcast_to(spec.actions[i], q.shape[:-1] + (spec.action_dim,))
        total = total + q[..., i] * generator_apply(spec, t, m, phi, x, a)
    return total


# ---------------------------------------------------------------------------
# residuals


@dataclass
class ResidualPath:
    """Residual path (R, N_t+1) and its running maximum per replica."""

    path: np.ndarray
    mass: Optional[np.ndarray] = None

    @property
    def max_abs(self) -> np.ndarray:
        return np.max(np.abs(self.path), axis=-1)

    @property
    def terminal(self) -> np.ndarray:
        return self.path[:, -1]


def fp_residual(spec: ModelSpec, traj: TrajectoryBundle, phi, dB=None, relaxed=None) -> ResidualPath:
    """Discrete martingale residual of the empirical flow against `phi`.

    ``M_j = <mu_j, phi> - <mu_0, phi> - sum_{l<j} (1/n) sum_k L phi(X^k_l, a^k_l) dt
    - sum_{l<j} <mu_l, grad phi>^T gamma dB_l``. With `relaxed` (R, n, N_t, A)
    the generator is integrated against those probability vectors instead of
    the recorded actions.
    """
    dB = traj.dB if dB is None else np.asarray(dB, dtype=float)
    R, N = traj.n_replicas, traj.grid.n_steps
    dt = traj.grid.dt
    times = traj.grid.times
    path = np.zeros((R, N + 1))
    v0 = np.mean(phi.value(traj.states[:, :, 0]), axis=1)
    drift_sum = np.zeros(R)
    for j in range(N + 1):
        v, g, _ = phi.evaluate(traj.states[:, :, j])
        path[:, j] = np.mean(v, axis=1) - v0 - drift_sum
        if j == N:
            break
        x = traj.states[:, :, j]
        m = traj.coefficient_measure(j)
        if relaxed is None:
            L = generator_apply(spec, float(times[j]), m, phi, x, spec.actions[traj.actions[:, :, j]])
        else:
            L = relaxed_generator(spec, float(times[j]), m, phi, x, relaxed[:, :, j])
        common = np.sum(np.mean(g, axis=1) * (dB[:, j] @ spec.gamma.T), axis=-1)
        drift_sum = drift_sum + np.mean(L, axis=1) * dt + common
    return ResidualPath(path)


def all_player_weights(spec: ModelSpec, traj: TrajectoryBundle, beta) -> GirsanovWeights:
    """Weights for every player deviating alone to `beta`, log weights (R, n, N_t+1)."""
    return weights_for(spec, traj, np.arange(traj.n), beta)


def _stack_log_weights(weights) -> np.ndarray:
    if isinstance(weights, GirsanovWeights):
        return weights.log_zeta
    return np.stack([w.log_zeta for w in weights], axis=1)


def nu_flow_residual(spec: ModelSpec, traj: TrajectoryBundle, weights, beta, phi, dB=None) -> ResidualPath:
    """Residual of the reweighted flow ``<nu_j, phi> = (1/n) sum_k zeta^k_j phi(X^k_j)``.

    ``<nu_j, phi> - <nu_0, phi> - sum_l (1/n) sum_k zeta^k_l L phi(X^k_l, beta) dt
    - sum_l <nu_l, grad phi>^T gamma dB_l``, along the baseline paths. The
    mass path ``(1/n) sum_k zeta^k_j`` is attached.
    """
    dB = traj.dB if dB is None else np.asarray(dB, dtype=float)
    zeta = np.exp(_stack_log_weights(weights))
    R, N = traj.n_replicas, traj.grid.n_steps
    if zeta.shape != (R, traj.n, N + 1):
        raise ConfigurationError(f"weights {zeta.shape} do not match the trajectory ({R}, {traj.n}, {N + 1})")
    alt = policy_actions(traj, np.arange(traj.n), beta)
    dt = traj.grid.dt
    times = traj.grid.times
    path = np.zeros((R, N + 1))
    v0 = np.mean(zeta[:, :, 0] * phi.value(traj.states[:, :, 0]), axis=1)
    drift_sum = np.zeros(R)
    for j in range(N + 1):
        z = zeta[:, :, j]
        v, g, _ = phi.evaluate(traj.states[:, :, j])
        path[:, j] = np.mean(z * v, axis=1) - v0 - drift_sum
        if j == N:
            break
        m = traj.coefficient_measure(j)
        L = generator_apply(spec, float(times[j]), m, phi, traj.states[:, :, j], spec.actions[alt[:, :, j]])
        common = np.sum(np.mean(z[..., None] * g, axis=1) * (dB[:, j] @ spec.gamma.T), axis=-1)
        drift_sum = drift_sum + np.mean(z * L, axis=1) * dt + common
    return ResidualPath(path, mass=np.mean(zeta, axis=1))


# ---------------------------------------------------------------------------
# scaling in n


SLOPE_BAND = (-1.3, -0.7)
SCALING_CSV_HEADER = ("n", "estimate", "se", "bound", "verdict")


@dataclass
class ScalingRow:
    n: int
    estimate: float
    se: float
    bound: float
    passed: bool


@dataclass
class ScalingTable:
    """Mean-square terminal residual per ``n`` with a log-log slope fit."""

    rows: list
    slope: float
    slope_se: float
    allowance: float
    kind: str = "fp"
    band: tuple = SLOPE_BAND
    mass_max_dev: list = field(default_factory=list)

    @property
    def slope_ok(self) -> bool:
        return bool(self.band[0] <= self.slope <= self.band[1])

    @property
    def bound_ok(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def passed(self) -> bool:
        return self.slope_ok and self.bound_ok

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCALING_CSV_HEADER)
            for r in self.rows:
                w.writerow([r.n, repr(r.estimate), repr(r.se), repr(r.bound), "pass" if r.passed else "fail"])
            w.writerow(["slope", repr(self.slope), repr(self.slope_se), repr(self.allowance),
                        "pass" if self.slope_ok else "fail"])


def slope_fit(n_list, estimates, ses):
    """Weighted least squares of ``log E`` on ``log n``; returns slope and its SE."""
    ln = np.log(np.asarray(n_list, dtype=float))
    est = np.asarray(estimates, dtype=float)
    if np.any(est <= 0):
        raise ConfigurationError("residual estimates must be positive for a log-log fit")
    rel = np.maximum(np.asarray(ses, dtype=float) / est, 1e-12)
    w = 1.0 / rel ** 2
    X = np.stack([np.ones_like(ln), ln], axis=1)
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    coef = cov @ X.T @ (w * np.log(est))
    return float(coef[1]), float(np.sqrt(cov[1, 1]))


def _mean_square(spec, n, grid, replicas, seed, policies_for, phi, kind, beta, chunk, scenario):
    sq = []
    mass_dev = 0.0
    mass_sum = None
    for start in range(0, replicas, chunk):
        size = min(chunk, replicas - start)
        noise = generate_noise(seed, n, grid, spec, size, first_replica=start)
        traj = simulate_nplayer(spec, noise, policies_for(n, grid), scenario)
        if kind == "fp":
            res = fp_residual(spec, traj, phi)
        else:
            w = all_player_weights(spec, traj, beta)
            res = nu_flow_residual(spec, traj, w, beta, phi)
            mass_sum = res.mass if mass_sum is None else np.concatenate([mass_sum, res.mass])
        sq.append(res.terminal ** 2)
    sq = np.concatenate(sq)
    if mass_sum is not None:
        mean = mass_sum.mean(axis=0)
        se = mass_sum.std(axis=0, ddof=1) / np.sqrt(mass_sum.shape[0])
        mass_dev = float(np.max(np.abs(mean - 1.0) / np.maximum(se, 1e-300)))
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(sq.size)), mass_dev


def residual_scaling(spec: ModelSpec, policies_for: Callable, phi: BumpTestFunction, n_list: Sequence[int],
                     replicas: int, grid: TimeGrid, seed: int = 0, *, kind: str = "fp", beta=None,
                     chunk: int = 50, dt_allowance="calibrate", scenario=None) -> ScalingTable:
    """Terminal mean-square residual for each ``n`` in `n_list`.

    Parameters
    ----------
    policies_for : callable
        ``policies_for(n, grid) -> list of n policies``.
    kind : {"fp", "nu"}
        Residual of the empirical flow, or of the flow reweighted toward `beta`.
    dt_allowance : float or "calibrate"
        Time-step floor added to the bound. ``"calibrate"`` repeats the
        largest ``n`` at half the step and uses ``max(0, 2 (E(dt) - E(dt/2)))``.

    The bound column is ``T sup|grad phi|^2 |sigma|^2 / n`` for ``kind="fp"``.
    For ``kind="nu"`` the martingale integrand is ``zeta (sigma^T grad phi + phi Xi)``
    and the bound uses ``sup|sigma^T grad phi| + sup|Xi|`` and the largest
    per-node ``E zeta^2`` observed.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 3:
        raise ConfigurationError("residual scaling needs at least three values of n")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigurationError("n_list must be strictly ascending")
    if kind not in ("fp", "nu"):
        raise ConfigurationError(f"unknown residual kind {kind!r}")
    if kind == "nu" and beta is None:
        raise ConfigurationError("the reweighted residual needs a deviation policy")
    rows_raw = []
    mass_devs = []
    for n in n_list:
        est, se, dev = _mean_square(spec, n, grid, replicas, seed, policies_for, phi, kind, beta, chunk, scenario)
        rows_raw.append((n, est, se))
        mass_devs.append(dev)
    if dt_allowance == "calibrate":
        n = n_list[-1]
        fine, _, _ = _mean_square(spec, n, grid.refine(2), replicas, seed, policies_for, phi, kind, beta, chunk,
                                  _refine_scenario(scenario))
        allowance = max(0.0, 2.0 * (rows_raw[-1][1] - fine))
    else:
        allowance = float(dt_allowance)
    sig = float(np.linalg.norm(spec.sigma, 2))
    grad_sup = phi.sup_grad()
    if kind == "fp":
        const = spec.horizon * grad_sup ** 2 * sig ** 2
    else:
        const = _nu_constant(spec, grid, replicas, seed, policies_for, phi, beta, n_list[0], scenario)
    rows = [ScalingRow(n, est, se, const / n, bool(est <= const / n + allowance)) for n, est, se in rows_raw]
    slope, slope_se = slope_fit(n_list, [r.estimate for r in rows], [r.se for r in rows])
    return ScalingTable(rows, slope, slope_se, allowance, kind, mass_max_dev=mass_devs)


def _refine_scenario(scenario):
    if scenario is None:
        return None
    raise ConfigurationError("dt calibration with a fixed common path is not supported; pass a numeric allowance")


def _nu_constant(spec, grid, replicas, seed, policies_for, phi, beta, n, scenario):
    noise = generate_noise(seed, n, grid, spec, min(replicas, 200))
    traj = simulate_nplayer(spec, noise, policies_for(n, grid), scenario)
    w = all_player_weights(spec, traj, beta)
    xi_sup = float(np.max(np.linalg.norm(w.xi, axis=-1)))
    ez2 = float(np.max(np.mean(np.exp(2.0 * w.log_zeta), axis=(0, 1))))
    sig = float(np.linalg.norm(spec.sigma, 2))
    phi_sup = 1.0
    return spec.horizon * ez2 * (sig * phi.sup_grad() + phi_sup * xi_sup) ** 2
