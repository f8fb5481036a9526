"""Game instances and sampled checks of their standing assumptions.

Coefficients follow one calling convention throughout the package::

    drift(t, x, m, a)          -> (..., d)
    running_cost(t, x, m, a)   -> (...)
    terminal_cost(x, m)        -> (...)

with ``x`` of shape ``(..., d)``, ``a`` of shape ``(..., k)`` (action vectors,
not indices) and ``m`` a measure exposing ``mean()`` / ``moment(q)`` arrays
that broadcast against ``x``.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .exceptions import ConfigurationError, EvaluationError, UnsupportedModelError
from .grids import StateGrid
from .measures import MeasureSummary

CLAUSES = ("A.1", "A.2", "A.3", "A.4", "A.4-exponents", "A.5")


@dataclass(frozen=True, eq=False)
class InitialLaw:
    """Gaussian initial law ``N(mean, cov)``; a zero covariance gives a Dirac mass."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError("initial covariance has the wrong shape")
        vals, vecs = np.linalg.eigh(cov)
        if np.any(vals < -1e-12):
            raise ConfigurationError("initial covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_root", vecs * np.sqrt(np.clip(vals, 0.0, None)))

    @classmethod
    def gaussian(cls, mean, std) -> "InitialLaw":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, float(std) ** 2 * np.eye(mean.size))

    @classmethod
    def dirac(cls, x) -> "InitialLaw":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x, np.zeros((x.size, x.size)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_dirac(self) -> bool:
        return not np.any(self.cov)

    def from_normals(self, z) -> np.ndarray:
        """Map standard normal draws (..., d) to draws from the law."""
        return self.mean + np.asarray(z) @ self._root.T

    def quadrature(self, order: int = 41):
        """Tensor Gauss-Hermite nodes (Q, d) and weights (Q,) for the law."""
        if self.is_dirac:
            return self.mean[None, :], np.ones(1)
        z, w = hermegauss(order)
        w = w / np.sqrt(2 * np.pi)
        nodes = np.array(list(product(z, repeat=self.dim)))
        weights = np.prod(np.array(list(product(w, repeat=self.dim))), axis=1)
        return self.from_normals(nodes), weights

    def moment(self, q: float) -> float:
        """``E|X|^q`` by high-order quadrature (exact for even integer q)."""
        nodes, weights = self.quadrature(80 if self.dim == 1 else 20)
        norms = np.linalg.norm(nodes, axis=-1)
        return float(np.sum(weights * (norms ** q if q else 1.0)))

    def histogram(self, grid: StateGrid) -> np.ndarray:
        """Project the law onto grid nodes, preserving mass and (inside the box) the mean."""
        nodes, weights = self.quadrature()
        hist = grid.scatter(weights, nodes)
        return hist / hist.sum()


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A game instance: coefficients, action grid, initial law and growth data."""

    name: str
    dim: int
    horizon: float
    drift: Callable
    sigma: np.ndarray
    gamma: np.ndarray
    running_cost: Callable
    terminal_cost: Callable
    actions: np.ndarray
    action_bounds: tuple
    initial_law: InitialLaw
    p: float
    p_prime: float
    c1: float
    c2: float
    separable: bool = False
    running_cost_measure: Optional[Callable] = None
    running_cost_control: Optional[Callable] = None
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ConfigurationError("dimension must be a positive integer")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigurationError("horizon must be positive")
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if sigma.shape != (d, d) or gamma.shape != (d, d):
            raise ConfigurationError("sigma and gamma must be d x d")
        if np.linalg.cond(sigma) > 1e12:
            raise ConfigurationError("sigma must be invertible")
        actions = np.asarray(self.actions, dtype=float)
        if actions.ndim == 1:
            actions = actions[:, None]
        if actions.shape[0] == 0:
            raise ConfigurationError("action set is empty")
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), actions.shape[1:]) for b in self.action_bounds)
        if np.any(actions < lo - 1e-12) or np.any(actions > hi + 1e-12):
            raise ConfigurationError("action grid leaves its declared bounds")
        p, pp = float(self.p), float(self.p_prime)
        if not ((p == 0 and pp == 0) or (0 < p <= max(p, 2.0) < pp)):
            raise ConfigurationError(f"exponents violate the growth convention: p={p}, p'={pp}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigurationError("growth constants must be positive")
        if self.initial_law.dim != d:
            raise ConfigurationError("initial law dimension mismatch")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "sigma_inv", np.linalg.inv(sigma))

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def replace(self, **changes) -> "ModelSpec":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return ModelSpec(**fields)


# ---------------------------------------------------------------------------
# assumption checks


@dataclass
class ClauseResult:
    clause: str
    passed: bool
    worst_margin: float
    worst_sample: dict
    detail: str = ""

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class ValidationReport:
    model: str
    sample_budget: int
    seed: int
    clauses: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def __getitem__(self, clause: str) -> ClauseResult:
        for c in self.clauses:
            if c.clause == clause:
                return c
        raise KeyError(clause)

    def to_jsonl(self) -> str:
        lines = []
        for c in self.clauses:
            rec = {"model": self.model, "sample_budget": self.sample_budget, "seed": self.seed}
            rec.update(c.to_record())
            lines.append(json.dumps(rec, sort_keys=True, default=_json_default))
        return "\n".join(lines) + "\n"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj).__name__)


class _Worst:
    """Tracks the smallest margin seen for one clause."""

    def __init__(self, clause):
        self.clause = clause
        self.margin = np.inf
        self.sample = {}

    def update(self, margins, samples: Callable[[int], dict]):
        margins = np.asarray(margins, dtype=float)
        if margins.size == 0:
            return
        i = int(np.argmin(margins))
        if margins.flat[i] < self.margin:
            self.margin = float(margins.flat[i])
            self.sample = samples(i)

    def result(self, tol=0.0, detail="") -> ClauseResult:
        return ClauseResult(self.clause, bool(self.margin >= -tol), self.margin, self.sample, detail)


def _finite(values, clause, what):
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"{what} returned a non-finite value while checking {clause}", clause=clause)
    return values


def _sample_measures(rng, count, dim, atoms=5):
    centers = rng.normal(0.0, 2.0, size=(count, 1, dim))
    spread = rng.uniform(0.1, 2.0, size=(count, 1, 1))
    pts = centers + spread * rng.standard_normal((count, atoms, dim))
    w = rng.dirichlet(np.ones(atoms), size=count)
    return MeasureSummary(pts, w, check=False)


def validate_assumptions(spec: ModelSpec, sample_budget: int = 10_000, rng_seed: int = 0,
                         *, continuity_step: float = 1e-7, continuity_tol: float = 1e-3) -> ValidationReport:
    """Sampled check of the standing assumptions on `spec`.

    Growth clauses compare ``|b|``, ``|f| + |g|`` with their declared bounds at
    random ``(t, x, m, a)``; convexity of ``{(b(a), z): z <= f(a)}`` is probed
    with convex combinations of sampled action pairs. Every clause reports the
    worst margin it saw and the sample that produced it.
    """
    if not isinstance(spec, ModelSpec):
        raise ConfigurationError("validate_assumptions needs a ModelSpec")
    if int(sample_budget) < 1:
        raise ConfigurationError("sample_budget must be at least 1")
    n = int(sample_budget)
    rng = np.random.default_rng(rng_seed)
    d, p = spec.dim, spec.p
    t = rng.uniform(0.0, spec.horizon, size=n)
    x = rng.normal(0.0, 3.0, size=(n, 1, d))
    m = _sample_measures(rng, n, d)
    ai = rng.integers(0, spec.n_actions, size=n)
    a = spec.actions[ai][:, None, :]
    results = []

    def sample(i):
        return {
            "t": float(t[i]), "x": x[i, 0].tolist(), "action_index": int(ai[i]),
            "measure_atoms": m.atoms[i].tolist(), "measure_weights": m.weights[i].tolist(),
        }

    # A.1: finite, nonempty, bounded action grid
    lo, hi = (np.broadcast_to(np.asarray(b, float), spec.actions.shape[1:]) for b in spec.action_bounds)
    a1 = _Worst("A.1")
    margins = np.minimum(spec.actions - lo, hi - spec.actions).min(axis=1)
    a1.update(margins, lambda i: {"action_index": int(i), "action": spec.actions[i].tolist()})
    ok_a1 = spec.n_actions > 0 and np.all(np.isfinite(spec.actions))
    results.append(a1.result(tol=1e-12) if ok_a1 else ClauseResult("A.1", False, -np.inf, {}, "empty or non-finite"))

    bvals = _finite(_eval_batched(spec.drift, t, x, m, a), "A.3", "drift")
    fvals = _finite(_eval_batched(spec.running_cost, t, x, m, a), "A.4", "running_cost")
    gvals = _finite(np.broadcast_to(spec.terminal_cost(x, m), (n, 1)), "A.4", "terminal_cost")

    # A.2: continuity probe in (x, m)
    shift = continuity_step * rng.standard_normal((n, 1, d))
    m_shift = MeasureSummary(m.atoms + continuity_step * rng.standard_normal(m.atoms.shape), m.weights, check=False)
    b2 = _finite(_eval_batched(spec.drift, t, x + shift, m_shift, a), "A.2", "drift")
    f2 = _finite(_eval_batched(spec.running_cost, t, x + shift, m_shift, a), "A.2", "running_cost")
    g2 = _finite(np.broadcast_to(spec.terminal_cost(x + shift, m_shift), (n, 1)), "A.2", "terminal_cost")
    jump = np.maximum.reduce([
        np.linalg.norm(b2 - bvals, axis=-1).ravel(), np.abs(f2 - fvals).ravel(), np.abs(g2 - gvals).ravel()
    ])
    a2 = _Worst("A.2")
    a2.update(continuity_tol - jump, sample)
    results.append(a2.result(detail=f"perturbation {continuity_step:g}, tolerance {continuity_tol:g}"))

    # A.3: linear growth of the drift
    xnorm = np.linalg.norm(x[:, 0], axis=-1)
    mp = m.moment(p)[:, 0]
    ind = 1.0 if p > 0 else 0.0
    bound3 = spec.c1 * (1.0 + ind * xnorm + ind * mp ** (1.0 / max(1.0, p)))
    a3 = _Worst("A.3")
    a3.update(bound3 - np.linalg.norm(bvals[:, 0], axis=-1), sample)
    results.append(a3.result(tol=1e-12 * spec.c1))

    # A.4: growth of the costs
    bound4 = spec.c2 * (1.0 + (xnorm ** p if p else 1.0) + mp)
    a4 = _Worst("A.4")
    a4.update(bound4 - (np.abs(fvals[:, 0]) + np.abs(gvals[:, 0])), sample)
    results.append(a4.result(tol=1e-12 * spec.c2))

    # exponents and initial moment
    pp = spec.p_prime
    exp_ok = (p == 0 and pp == 0) or (0 < p <= max(p, 2.0) < pp)
    lam_moment = spec.initial_law.moment(pp) if pp > 0 else 1.0
    results.append(ClauseResult(
        "A.4-exponents", bool(exp_ok and np.isfinite(lam_moment)), float(lam_moment),
        {"p": p, "p_prime": pp}, "initial law p'-moment reported as margin",
    ))

    results.append(_check_convexity(spec, rng, n))
    return ValidationReport(spec.name, n, int(rng_seed), results)


def _eval_batched(fn, t, x, m, a):
    # coefficients take a scalar time
    out = [None] * len(t)
    for i, ti in enumerate(t):
        out[i] = fn(float(ti), x[i], m[i], a[i])
    return np.asarray(out)


def _upper_envelope_1d(drifts, costs, target):
    order = np.argsort(drifts, kind="stable")
    b, f = drifts[order], costs[order]
    ub, inv = np.unique(b, return_inverse=True)
    fmax = np.full(ub.size, -np.inf)
    np.maximum.at(fmax, inv, f)
    return np.interp(target, ub, fmax)


def _check_convexity(spec: ModelSpec, rng, n: int, lambdas=(0.25, 0.5, 0.75), pairs_per_sample=4) -> ClauseResult:
    """Probe convexity of ``K(t, x, m)`` with convex combinations of action pairs."""
    worst = _Worst("A.5")
    n_points = max(1, min(n, 2000))
    t = rng.uniform(0.0, spec.horizon, size=n_points)
    x = rng.normal(0.0, 3.0, size=(n_points, 1, spec.dim))
    m = _sample_measures(rng, n_points, spec.dim)
    acts = spec.actions
    na = spec.n_actions
    if na == 1:
        return ClauseResult("A.5", True, 0.0, {}, "single action")
    for s in range(n_points):
        B = _finite(np.asarray(spec.drift(float(t[s]), np.broadcast_to(x[s], (na, spec.dim)), m[s], acts)), "A.5", "drift")
        F = _finite(np.asarray(spec.running_cost(float(t[s]), np.broadcast_to(x[s], (na, spec.dim)), m[s], acts)), "A.5", "running_cost")
        B = B.reshape(na, spec.dim)
        F = F.reshape(na)
        pairs = rng.integers(0, na, size=(pairs_per_sample, 2))
        if s == 0:
            # extreme pair always probed once
            pairs[0] = (0, na - 1)
        lam = np.asarray(lambdas)
        i, j = pairs[:, 0][:, None], pairs[:, 1][:, None]
        bc = lam[None, :, None] * B[i] + (1 - lam[None, :, None]) * B[j]
        fc = lam[None, :] * F[i] + (1 - lam[None, :]) * F[j]
        ftol = 1e-9 * (1.0 + np.abs(fc))
        if spec.dim == 1:
            reach = _upper_envelope_1d(B[:, 0], F, bc[..., 0])
        else:
            gaps = np.linalg.norm(B[:, None, :] - B[None, :, :], axis=-1)
            np.fill_diagonal(gaps, np.inf)
            dtol = 0.5 * np.max(np.min(gaps, axis=1)) + 1e-12
            dist = np.linalg.norm(bc[..., None, :] - B, axis=-1)
            reach = np.where(dist <= dtol, F, -np.inf).max(axis=-1)
        margins = reach - fc + ftol

        def sample(k, s=s, pairs=pairs):
            pi, li = divmod(k, len(lambdas))
            return {
                "t": float(t[s]), "x": x[s, 0].tolist(),
                "action_pair": [int(pairs[pi, 0]), int(pairs[pi, 1])], "lambda": float(lambdas[li]),
            }

        worst.update(margins.ravel(), sample)
    return worst.result(detail="convex combinations must lie under the action hull")


@dataclass
class MonotonicityReport:
    max_terminal: float
    max_running: float
    tolerance: float
    values: list

    @property
    def passed(self) -> bool:
        return self.max_terminal <= self.tolerance and self.max_running <= self.tolerance

    @property
    def max_value(self) -> float:
        return max(self.max_terminal, self.max_running)


def _signed_integral(fn, m: MeasureSummary, mt: MeasureSummary) -> float:
    # int [fn(x, m) - fn(x, m~)] (m - m~)(dx) over both finite supports
    on_m = fn(m.atoms, m) - fn(m.atoms, mt)
    on_mt = fn(mt.atoms, m) - fn(mt.atoms, mt)
    return float(np.sum(m.weights * on_m) - np.sum(mt.weights * on_mt))


def lasry_lions_integrals(spec: ModelSpec, m: MeasureSummary, mt: MeasureSummary, t: float):
    """Terminal and running-cost monotonicity integrals for one pair at time `t`."""
    if not spec.separable or spec.running_cost_measure is None:
        raise UnsupportedModelError("monotonicity check needs a separable running cost")
    g_val = _signed_integral(spec.terminal_cost, m, mt)
    f_val = _signed_integral(lambda x, mu: spec.running_cost_measure(t, x, mu), m, mt)
    return g_val, f_val


def check_lasry_lions(spec: ModelSpec, measure_pairs: Sequence, t_samples: Sequence[float],
                      tol: float = 1e-10) -> MonotonicityReport:
    """Evaluate the monotonicity integrals exactly over finite supports.

    Passes iff every terminal and running-cost integral is ``<= tol``.
    """
    values = []
    g_max = f_max = -np.inf
    for k, (m, mt) in enumerate(measure_pairs):
        for t in t_samples:
            g_val, f_val = lasry_lions_integrals(spec, m, mt, float(t))
            values.append({"pair": k, "t": float(t), "terminal": g_val, "running": f_val})
            g_max, f_max = max(g_max, g_val), max(f_max, f_val)
    return MonotonicityReport(float(g_max), float(f_max), tol, values)


def random_measure_pairs(dim: int, count: int, seed: int = 0, atoms: int = 6):
    """Random finite-support pairs for monotonicity sweeps."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        a = _sample_measures(rng, 1, dim, atoms)[0]
        b = _sample_measures(rng, 1, dim, atoms)[0]
        pairs.append((a, b))
    return pairs


# ---------------------------------------------------------------------------
# builtin models

_DEFAULTS = {
    "lq_monotone": dict(c=1.0, c_g=0.5, a_max=2.0, n_actions=161, sigma=1.0, gamma=0.5,
                        m0=0.5, s0=0.5, horizon=1.0, dim=1),
    "lq_crowd": dict(c=1.0, c_g=0.5, a_max=2.0, n_actions=21, sigma=1.0, gamma=0.5,
                     m0=0.5, s0=0.5, horizon=1.0),
    "bounded_tanh": dict(kappa=0.5, c=1.0, c_g=0.5, a_max=1.0, n_actions=21, sigma=1.0, gamma=0.5,
                         m0=0.0, s0=0.5, horizon=1.0),
}

_RANGES = {
    "c": (0.0, 1e3), "c_g": (0.0, 1e3), "a_max": (1e-9, 1e3), "n_actions": (1, 10_001),
    "sigma": (1e-6, 1e3), "gamma": (0.0, 1e3), "m0": (-1e3, 1e3), "s0": (0.0, 1e3),
    "horizon": (1e-9, 1e3), "kappa": (0.0, 1e3), "dim": (1, 4),
}


def builtin_names():
    return tuple(_DEFAULTS)


def _action_grid(a_max, n_actions, dim):
    axis = np.linspace(-a_max, a_max, int(n_actions)) if n_actions > 1 else np.zeros(1)
    return np.array(list(product(axis, repeat=dim)))


def _dot(x, y):
    return np.sum(x * y, axis=-1)


def builtin_model(name: str, params: Optional[Mapping] = None) -> ModelSpec:
    """Instantiate one of the builtin games.

    ``lq_monotone``
        ``b = a``, ``f = -|a|^2/2 - c x.mean(m)``, ``g = -c_g x.mean(m)``;
        monotone in the Lasry-Lions sense.
    ``lq_crowd``
        ``b = a``, ``f = -a^2/2 - c (x - mean(m))^2``, ``g = -c_g (x - mean(m))^2``;
        crowd-seeking, not monotone.
    ``bounded_tanh``
        ``b = tanh(a) - kappa tanh(x - mean(m))``, ``f = -a^2/2 - c tanh(x - mean(m))^2``,
        ``g = -c_g tanh(x)^2``; bounded coefficients (p = p' = 0).
    """
    if name not in _DEFAULTS:
        raise ConfigurationError(f"unknown builtin model {name!r}; choose from {sorted(_DEFAULTS)}")
    params = dict(params or {})
    unknown = set(params) - set(_DEFAULTS[name])
    if unknown:
        raise ConfigurationError(f"unknown parameters for {name}: {sorted(unknown)}")
    cfg = {**_DEFAULTS[name], **params}
    if name == "lq_monotone" and "n_actions" not in params and float(cfg["dim"]) > 1:
        # the per-axis grid is a tensor product; keep it small in higher dimension
        cfg["n_actions"] = 21
    for key, value in cfg.items():
        lo, hi = _RANGES[key]
        try:
            value = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"parameter {key} is not numeric: {value!r}") from exc
        if not (lo <= value <= hi):
            raise ConfigurationError(f"parameter {key}={value} outside [{lo}, {hi}]")
        cfg[key] = value
    cfg["n_actions"] = int(cfg["n_actions"])
    d = int(cfg.get("dim", 1))
    cfg["dim"] = d
    c, cg, amax = cfg["c"], cfg["c_g"], cfg["a_max"]
    law = InitialLaw.gaussian(np.full(d, cfg["m0"]), cfg["s0"])
    common = dict(
        dim=d, horizon=cfg["horizon"], sigma=cfg["sigma"] * np.eye(d), gamma=cfg["gamma"] * np.eye(d),
        actions=_action_grid(amax, cfg["n_actions"], d), action_bounds=(-amax, amax),
        initial_law=law, separable=True,
    )
    if name != "lq_monotone":
        cfg.pop("dim", None)

    if name == "lq_monotone":
        def drift(t, x, m, a):
            return np.broadcast_to(a, np.broadcast_shapes(np.shape(x), np.shape(a))).copy()

        def f1(t, x, m):
            return -c * _dot(x, m.mean())

        def f2(t, x, a):
            return -0.5 * _dot(a, a)

        def terminal(x, m):
            return -cg * _dot(x, m.mean())

        return ModelSpec(
            name=name, drift=drift, running_cost=lambda t, x, m, a: f1(t, x, m) + f2(t, x, a),
            terminal_cost=terminal, p=2.0, p_prime=4.0, c1=amax,
            c2=max(d * amax ** 2 / 2.0, (c + cg) / 2.0, 1e-12),
            running_cost_measure=f1, running_cost_control=f2, params=cfg, **common,
        )

    if name == "lq_crowd":
        def drift(t, x, m, a):
            return np.broadcast_to(a, np.broadcast_shapes(np.shape(x), np.shape(a))).copy()

        def f1(t, x, m):
            return -c * _dot(x - m.mean(), x - m.mean())

        def f2(t, x, a):
            return -0.5 * _dot(a, a)

        def terminal(x, m):
            return -cg * _dot(x - m.mean(), x - m.mean())

        return ModelSpec(
            name=name, drift=drift, running_cost=lambda t, x, m, a: f1(t, x, m) + f2(t, x, a),
            terminal_cost=terminal, p=2.0, p_prime=4.0, c1=amax,
            c2=max(amax ** 2 / 2.0, 2.0 * (c + cg), 1e-12),
            running_cost_measure=f1, running_cost_control=f2, params=cfg, **common,
        )

    kappa = cfg["kappa"]

    def drift(t, x, m, a):
        return np.tanh(a) - kappa * np.tanh(x - m.mean())

    def f1(t, x, m):
        return -c * np.sum(np.tanh(x - m.mean()) ** 2, axis=-1)

    def f2(t, x, a):
        return -0.5 * _dot(a, a)

    def terminal(x, m):
        return -cg * np.sum(np.tanh(x) ** 2, axis=-1)

    return ModelSpec(
        name=name, drift=drift, running_cost=lambda t, x, m, a: f1(t, x, m) + f2(t, x, a),
        terminal_cost=terminal, p=0.0, p_prime=0.0, c1=1.0 + kappa,
        c2=amax ** 2 / 2.0 + c + cg,
        running_cost_measure=f1, running_cost_control=f2, params=cfg, **common,
    )


def null_model(dim: int = 1, horizon: float = 1.0, n_actions: int = 5, sigma: float = 1.0,
               gamma: float = 0.5, drift_scale: float = 1.0, terminal: float = 0.0) -> ModelSpec:
    """Zero running cost, constant terminal cost; drift ``drift_scale * a``."""
    law = InitialLaw.gaussian(np.zeros(dim), 0.5)

    def drift(t, x, m, a):
        return drift_scale * np.broadcast_to(a, np.broadcast_shapes(np.shape(x), np.shape(a)))

    def zero_f(t, x, m, a):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(a)[:-1]))

    def const_g(x, m):
        return np.full(np.shape(x)[:-1], float(terminal))

    return ModelSpec(
        name="null", dim=dim, horizon=horizon, drift=drift, sigma=sigma * np.eye(dim),
        gamma=gamma * np.eye(dim), running_cost=zero_f, terminal_cost=const_g,
        actions=_action_grid(1.0, n_actions, dim), action_bounds=(-1.0, 1.0), initial_law=law,
        p=0.0, p_prime=0.0, c1=max(drift_scale, 1e-12), c2=max(abs(terminal), 1.0), separable=True,
        running_cost_measure=lambda t, x, m: np.zeros(np.shape(x)[:-1]),
        running_cost_control=lambda t, x, a: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(a)[:-1])),
        params={"drift_scale": drift_scale, "terminal": terminal},
    )


def read_model_config(path) -> ModelSpec:
    """Load a builtin model from the ``[model]`` section of an INI-style file.

    ``name`` selects the builtin; every other key is a numeric parameter.
    """
    parser = configparser.ConfigParser()
    try:
        with open(Path(path), encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read model config {path}: {exc}") from exc
    if not parser.has_section("model"):
        raise ConfigurationError("config file lacks a [model] section")
    section = dict(parser.items("model"))
    name = section.pop("name", None)
    if name is None:
        raise ConfigurationError("[model] section needs a name")
    return builtin_model(name, section)
