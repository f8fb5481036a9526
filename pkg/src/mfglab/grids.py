"""Time and state discretizations.

`StateGrid` carries the multilinear interpolation stencil used by the
dynamic programming and Fokker-Planck passes: values are read back with
``gather`` and probability mass is pushed onto nodes with ``scatter``, both
from the same corner indices and weights so the two passes are adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, T]`` into ``n_steps`` intervals."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        # last node pinned to T exactly
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


@dataclass(frozen=True)
class StateGrid:
    """Tensor-product grid of bin centers on a box in ``R^d``.

    Parameters
    ----------
    lower, upper : array-like, shape (d,)
        Outermost bin centers per dimension.
    bins : array-like of int, shape (d,)
        Number of centers per dimension (at least 2).
    """

    lower: np.ndarray
    upper: np.ndarray
    bins: np.ndarray
    _axes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        bins = np.atleast_1d(np.asarray(self.bins, dtype=int))
        if bins.size == 1 and lower.size > 1:
            bins = np.full(lower.size, int(bins[0]))
        if not (lower.shape == upper.shape == bins.shape):
            raise ConfigurationError("lower, upper and bins must have the same length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ConfigurationError("grid bounds must be finite")
        if np.any(upper <= lower):
            raise ConfigurationError("grid upper bounds must exceed lower bounds")
        if np.any(bins < 2):
            raise ConfigurationError("each grid dimension needs at least 2 bins")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "bins", bins)
        axes = tuple(np.linspace(lo, hi, n) for lo, hi, n in zip(lower, upper, bins))
        object.__setattr__(self, "_axes", axes)

    @classmethod
    def uniform(cls, lower, upper, bins) -> "StateGrid":
        return cls(np.atleast_1d(lower), np.atleast_1d(upper), np.atleast_1d(bins))

    @classmethod
    def centered(cls, center, half_width, bins) -> "StateGrid":
        center = np.atleast_1d(np.asarray(center, dtype=float))
        half_width = np.broadcast_to(np.asarray(half_width, dtype=float), center.shape)
        return cls(center - half_width, center + half_width, np.broadcast_to(bins, center.shape))

    def __eq__(self, other):
        if not isinstance(other, StateGrid):
            return NotImplemented
        return (
            np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
            and np.array_equal(self.bins, other.bins)
        )

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes(), self.bins.tobytes()))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def size(self) -> int:
        return int(np.prod(self.bins))

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (self.bins - 1)

    @property
    def bin_width(self) -> float:
        """Largest spacing over dimensions."""
        return float(np.max(self.spacing))

    @property
    def axes(self) -> tuple:
        return self._axes

    @property
    def points(self) -> np.ndarray:
        """Bin centers, shape (G, d), C order over dimensions."""
        mesh = np.meshgrid(*self._axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def covers(self, center, sigma, gamma, horizon) -> bool:
        """Half-width condition ``>= 5 (|sigma| + |gamma|) sqrt(T)`` around `center`."""
        spread = 5.0 * (np.linalg.norm(sigma, 2) + np.linalg.norm(gamma, 2)) * np.sqrt(horizon)
        center = np.broadcast_to(np.asarray(center, dtype=float), self.lower.shape)
        return bool(np.all(center - spread >= self.lower - 1e-12) and np.all(center + spread <= self.upper + 1e-12))

    def nearest(self, y) -> np.ndarray:
        """Flat index of the nearest bin center, clamped to the box."""
        y = np.asarray(y, dtype=float)
        s = np.rint((y - self.lower) / self.spacing).astype(np.int64)
        s = np.clip(s, 0, self.bins - 1)
        return np.ravel_multi_index(tuple(np.moveaxis(s, -1, 0)), tuple(self.bins))

    def stencil(self, y):
        """Multilinear interpolation stencil for query points.

        Parameters
        ----------
        y : ndarray, shape (..., d)

        Returns
        -------
        index : ndarray of int, shape (..., 2**d)
        weight : ndarray, shape (..., 2**d)
            Nonnegative, summing to one along the last axis.
        outside : ndarray of bool, shape (...)
            True where the query was clamped onto the boundary.
        """
        y = np.asarray(y, dtype=float)
        s = (y - self.lower) / self.spacing
        top = self.bins - 1
        outside = np.any((s < -1e-12) | (s > top + 1e-12), axis=-1)
        s = np.clip(s, 0.0, top)
        i0 = np.minimum(np.floor(s).astype(np.int64), top - 1)
        frac = s - i0
        d = self.dim
        strides = np.array([int(np.prod(self.bins[k + 1:])) for k in range(d)], dtype=np.int64)
        index = np.zeros(y.shape[:-1] + (2 ** d,), dtype=np.int64)
        weight = np.ones(y.shape[:-1] + (2 ** d,))
        for c, corner in enumerate(product((0, 1), repeat=d)):
            corner = np.asarray(corner)
            index[..., c] = np.sum((i0 + corner) * strides, axis=-1)
            weight[..., c] = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=-1)
        return index, weight, outside

    def gather(self, values, y) -> np.ndarray:
        """Interpolate nodal `values` (G,) at points `y` (..., d)."""
        index, weight, _ = self.stencil(y)
        return np.sum(np.asarray(values)[index] * weight, axis=-1)

    def scatter(self, mass, y) -> np.ndarray:
        """Distribute `mass` (...) located at `y` (..., d) onto the nodes."""
        index, weight, _ = self.stencil(y)
        contrib = np.asarray(mass, dtype=float)[..., None] * weight
        return np.bincount(index.ravel(), weights=contrib.ravel(), minlength=self.size)
