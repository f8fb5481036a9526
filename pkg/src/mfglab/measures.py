"""Finite-support measures, measure flows and transport distances.

A `MeasureSummary` may carry leading batch axes: atoms of shape
``(..., K, d)`` describe one measure per batch index. Coefficient functions
only ever see measures through `mean`, `moment`, `atoms` and `weights`, and
the summaries returned by `mean` / `moment` keep a singleton atom axis so they
broadcast against state arrays of shape ``(..., P, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linprog

from .exceptions import DomainError
from .grids import StateGrid, TimeGrid

LP_MAX_ATOMS = 64
DEDUP_TOL = 1e-12


class MeasureSummary:
    """Weighted atoms with cached moments.

    Parameters
    ----------
    atoms : array-like, shape (..., K, d) or (K,)
        A 1-D input is read as K scalar atoms.
    weights : array-like, shape (..., K), optional
        Uniform when omitted.
    """

    def __init__(self, atoms, weights=None, *, check=True):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.shape[-2] == 0:
            raise DomainError("measure has empty support")
        if weights is None:
            k = atoms.shape[-2]
            weights = np.full(atoms.shape[:-1], 1.0 / k)
        else:
            weights = np.broadcast_to(np.asarray(weights, dtype=float), atoms.shape[:-1])
        if check:
            if np.any(weights < 0):
                raise DomainError("measure weights must be nonnegative")
            if np.any(np.abs(weights.sum(axis=-1) - 1.0) > 1e-12 * max(1, weights.shape[-1]) ** 0.5 + 1e-12):
                raise DomainError("measure weights must sum to one")
        self.atoms = atoms
        self.weights = weights
        self._moments = {}
        self._mean = None

    @classmethod
    def dirac(cls, x) -> "MeasureSummary":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @classmethod
    def from_histogram(cls, grid: StateGrid, hist) -> "MeasureSummary":
        return cls(grid.points, np.asarray(hist, dtype=float), check=False)

    @property
    def dim(self) -> int:
        return self.atoms.shape[-1]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.atoms.shape[:-2]

    def mean(self) -> np.ndarray:
        """First moment vector, shape (..., 1, d)."""
        if self._mean is None:
            self._mean = np.einsum("...k,...kd->...d", self.weights, self.atoms)[..., None, :]
        return self._mean

    def moment(self, q: float) -> np.ndarray:
        """``sum_i w_i |x_i|^q``, shape (..., 1)."""
        q = float(q)
        if q not in self._moments:
            norms = np.linalg.norm(self.atoms, axis=-1)
            self._moments[q] = np.sum(self.weights * _power(norms, q), axis=-1)[..., None]
        return self._moments[q]

    def variance(self) -> np.ndarray:
        """Trace of the covariance, shape (..., 1)."""
        centered = self.atoms - self.mean()
        return np.sum(self.weights * np.sum(centered ** 2, axis=-1), axis=-1)[..., None]

    def integrate(self, fn) -> np.ndarray:
        """``<m, fn>`` for `fn` mapping atoms (..., K, d) to values (..., K)."""
        return np.sum(self.weights * fn(self.atoms), axis=-1)

    def __getitem__(self, idx) -> "MeasureSummary":
        if not self.batch_shape:
            raise IndexError("unbatched measure")
        return MeasureSummary(self.atoms[idx], self.weights[idx], check=False)

    def __repr__(self):
        return f"MeasureSummary(batch={self.batch_shape}, atoms={self.n_atoms}, d={self.dim})"


class SelfInsertedMeasure:
    """``(1 - w) * base + w * delta_x`` for every candidate point ``x``.

    Used by the frozen-environment best response: the deviating player's own
    particle enters the empirical measure with weight ``1/n`` at whatever
    state it is evaluated at. ``mean()`` and ``moment()`` therefore vary along
    the point axis instead of carrying a singleton there.

    Parameters
    ----------
    base : MeasureSummary
        Batch of other-player measures, batch shape ``(R,)``.
    points : ndarray, shape (P, d)
    weight : float
    """

    def __init__(self, base: MeasureSummary, points, weight: float):
        self.base = base
        self.points = np.asarray(points, dtype=float)
        self.weight = float(weight)

    @property
    def dim(self) -> int:
        return self.base.dim

    def mean(self) -> np.ndarray:
        w = self.weight
        return (1.0 - w) * self.base.mean() + w * self.points

    def moment(self, q: float) -> np.ndarray:
        w = self.weight
        own = _power(np.linalg.norm(self.points, axis=-1), float(q))
        return (1.0 - w) * self.base.moment(q) + w * own

    @property
    def atoms(self) -> np.ndarray:
        base = self.base.atoms[..., None, :, :]
        shape = base.shape[:-3] + (self.points.shape[0],) + base.shape[-2:]
        pts = np.broadcast_to(self.points[:, None, :], shape[:-2] + (1, self.dim))
        return np.concatenate([np.broadcast_to(base, shape), pts], axis=-2)

    @property
    def weights(self) -> np.ndarray:
        w = self.weight
        base = (1.0 - w) * self.base.weights[..., None, :]
        shape = base.shape[:-2] + (self.points.shape[0], base.shape[-1])
        own = np.full(shape[:-1] + (1,), w)
        return np.concatenate([np.broadcast_to(base, shape), own], axis=-1)


def _power(values, q):
    if q == 0:
        return np.ones_like(values)
    return values ** q


@dataclass(frozen=True)
class MeasureFlow:
    """One `MeasureSummary` per node of a `TimeGrid`."""

    grid: TimeGrid
    measures: tuple

    def __post_init__(self):
        measures = tuple(self.measures)
        if len(measures) != self.grid.n_steps + 1:
            raise DomainError(
                f"flow has {len(measures)} nodes, grid expects {self.grid.n_steps + 1}"
            )
        dims = {m.dim for m in measures}
        if len(dims) != 1:
            raise DomainError("inconsistent support dimension along flow")
        object.__setattr__(self, "measures", measures)

    @classmethod
    def from_histograms(cls, grid: TimeGrid, state_grid: StateGrid, hist) -> "MeasureFlow":
        hist = np.asarray(hist, dtype=float)
        return cls(grid, tuple(MeasureSummary.from_histogram(state_grid, h) for h in hist))

    @classmethod
    def constant(cls, grid: TimeGrid, measure: MeasureSummary) -> "MeasureFlow":
        return cls(grid, (measure,) * (grid.n_steps + 1))

    def __getitem__(self, j) -> MeasureSummary:
        return self.measures[j]

    def __len__(self):
        return len(self.measures)

    def means(self) -> np.ndarray:
        return np.stack([m.mean()[0] for m in self.measures])

    def variances(self) -> np.ndarray:
        return np.array([float(m.variance()[0]) for m in self.measures])


class WassersteinResult(NamedTuple):
    value: float
    method: str
    exact: bool


def moment(mu: MeasureSummary, q: float) -> float:
    """``sum_i w_i |x_i|^q`` for an unbatched measure."""
    if q < 0:
        raise DomainError("moment order must be nonnegative")
    return float(np.squeeze(mu.moment(q)))


def _sorted_1d(mu: MeasureSummary):
    x = mu.atoms[:, 0]
    order = np.argsort(x, kind="stable")
    return x[order], mu.weights[order]


def _monotone_cost(mu: MeasureSummary, nu: MeasureSummary, cost) -> float:
    """Transport cost of the quantile coupling in d=1."""
    x, w = _sorted_1d(mu)
    y, v = _sorted_1d(nu)
    cw = np.cumsum(w)
    cv = np.cumsum(v)
    cw /= cw[-1]
    cv /= cv[-1]
    levels = np.union1d(cw, cv)
    du = np.diff(np.concatenate([[0.0], levels]))
    mid = levels - 0.5 * du
    qx = x[np.minimum(np.searchsorted(cw, mid), x.size - 1)]
    qy = y[np.minimum(np.searchsorted(cv, mid), y.size - 1)]
    return float(np.sum(du * cost(np.abs(qx - qy))))


def _dedup(mu: MeasureSummary):
    atoms, weights = mu.atoms, mu.weights
    keep = weights > 0
    atoms, weights = atoms[keep], weights[keep]
    key = np.round(atoms / DEDUP_TOL).astype(np.int64) if atoms.size else atoms
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    merged = np.bincount(inverse.ravel(), weights=weights, minlength=first.size)
    return atoms[first], merged


def _lp_cost(mu: MeasureSummary, nu: MeasureSummary, cost) -> float:
    x, w = _dedup(mu)
    y, v = _dedup(nu)
    dist = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1)
    c = cost(dist).ravel()
    m, k = w.size, v.size
    rows = np.zeros((m, m * k))
    for i in range(m):
        rows[i, i * k:(i + 1) * k] = 1.0
    cols = np.zeros((k, m * k))
    for j in range(k):
        cols[j, j::k] = 1.0
    a_eq = np.vstack([rows, cols])
    b_eq = np.concatenate([w, v / v.sum() * w.sum()])
    res = linprog(c, A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise DomainError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def _cost_fn(r: float):
    if r == 0:
        return lambda d: np.minimum(1.0, d)
    return lambda d: d ** r


def _finish(total: float, r: float) -> float:
    if r == 0:
        return total
    return total ** (1.0 / max(1.0, r))


def wasserstein(
    mu: MeasureSummary,
    nu: MeasureSummary,
    r: float = 1.0,
    *,
    n_proj: int = 64,
    seed: int = 0,
    full: bool = False,
):
    """Order-`r` Wasserstein distance between two finite measures.

    ``W_r = (inf_pi E|X - Y|^r)^(1 / max(1, r))`` for ``r > 0`` and the
    truncated-cost ``W_0 = inf_pi E[1 ^ |X - Y|]``.

    In d=1 with ``r >= 1`` the quantile coupling is optimal. Otherwise the
    transport LP is solved when both supports have at most 64 atoms; larger
    problems fall back to the quantile coupling (an upper bound) in d=1, or to
    a sliced average over `n_proj` random directions when ``d > 1``.

    Parameters
    ----------
    full : bool
        Return a `WassersteinResult` carrying the method and exactness flag
        instead of a bare float.
    """
    if r < 0:
        raise DomainError("Wasserstein order must be nonnegative")
    if mu.batch_shape or nu.batch_shape:
        raise DomainError("wasserstein expects unbatched measures")
    if mu.dim != nu.dim:
        raise DomainError("measures live in different dimensions")
    cost = _cost_fn(r)
    small = _dedup(mu)[1].size <= LP_MAX_ATOMS and _dedup(nu)[1].size <= LP_MAX_ATOMS
    if mu.dim == 1 and r >= 1:
        out = WassersteinResult(_finish(_monotone_cost(mu, nu, cost), r), "quantile", True)
    elif small:
        out = WassersteinResult(_finish(_lp_cost(mu, nu, cost), r), "lp", True)
    elif mu.dim == 1:
        out = WassersteinResult(_finish(_monotone_cost(mu, nu, cost), r), "quantile-upper-bound", False)
    else:
        rng = np.random.default_rng(seed)
        dirs = rng.standard_normal((n_proj, mu.dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        total = 0.0
        for theta in dirs:
            pm = MeasureSummary(mu.atoms @ theta, mu.weights, check=False)
            pn = MeasureSummary(nu.atoms @ theta, nu.weights, check=False)
            total += _monotone_cost(pm, pn, cost)
        out = WassersteinResult(_finish(total / n_proj, r), "sliced", False)
    return out if full else out.value


def flow_distance(f1: MeasureFlow, f2: MeasureFlow, r: float = 1.0) -> float:
    """Sup over nodes of the order-`r` Wasserstein distance."""
    if f1.grid != f2.grid:
        raise DomainError("flows are defined on different time grids")
    return max(wasserstein(a, b, r) for a, b in zip(f1.measures, f2.measures))


def empirical_w1_scale(grid: StateGrid, hist, m: int) -> float:
    """Sampling scale of ``W_1(empirical_m, mu)`` in d=1.

    ``int sqrt(F (1 - F) / m) dx`` bounds the expected ``W_1`` between an
    m-sample empirical measure and the histogram law ``mu`` from above.
    """
    if grid.dim != 1:
        raise DomainError("empirical_w1_scale is one-dimensional")
    cdf = np.clip(np.cumsum(np.asarray(hist, dtype=float)), 0.0, 1.0)
    h = grid.spacing[0]
    return float(np.sum(np.sqrt(cdf[:-1] * (1.0 - cdf[:-1]) / m)) * h)


def stack_measures(measures: Sequence[MeasureSummary]) -> MeasureSummary:
    """Batch measures sharing an atom count into one summary."""
    return MeasureSummary(
        np.stack([m.atoms for m in measures]), np.stack([m.weights for m in measures]), check=False
    )
