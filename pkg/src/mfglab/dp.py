"""Backward dynamic programming and forward mass transport on a state grid.

Both passes use the same one-step kernel: from node ``x`` under action ``a``
the next state is ``x + b dt + sigma sqrt(dt) xi + shift_j`` with ``xi``
on tensor Gauss-Hermite nodes and ``shift_j`` the common increment. Values
are read back and mass is pushed forward with the grid's multilinear stencil.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .exceptions import InternalError
from .grids import StateGrid, TimeGrid

TIE_TOL = 1e-12


@lru_cache(maxsize=32)
def gauss_hermite(quad_points: int, dim: int):
    """Standard-normal tensor nodes (Q, d) and weights (Q,)."""
    z, w = hermegauss(int(quad_points))
    w = w / np.sqrt(2 * np.pi)
    nodes = np.array(list(product(z, repeat=dim)))
    weights = np.prod(np.array(list(product(w, repeat=dim))), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def argmax_lowest(q: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmax over the last axis, ties broken toward the lowest index."""
    best = np.max(q, axis=-1, keepdims=True)
    near = q >= best - tie_tol * (1.0 + np.abs(best))
    return np.argmax(near, axis=-1)


@dataclass
class BackwardResult:
    value: np.ndarray       # (N+1, G)
    policy: np.ndarray      # (N, G)
    clamped: np.ndarray     # (N, G) quadrature mass leaving the box under the chosen action
    q: Optional[np.ndarray] = None  # (N, G, A) action values, when requested


def backward_pass(grid: StateGrid, tgrid: TimeGrid, reward: Callable, drift: Callable, terminal,
                  shifts, sigma, quad_points: int = 7, policy: Optional[np.ndarray] = None,
                  tie_tol: float = TIE_TOL) -> BackwardResult:
    """Dynamic programming recursion on the grid.

    Parameters
    ----------
    reward, drift : callable
        ``reward(j) -> (G, A)`` running reward rates and ``drift(j) -> (G, A, d)``.
    terminal : ndarray, shape (G,)
    shifts : ndarray, shape (N, d)
        Common displacement ``gamma dB_j`` added at step ``j``.
    policy : ndarray, shape (N, G), optional
        Evaluate this table instead of maximizing. Values are taken from the
        same action-value array the maximizing pass builds.
    """
    return backward_mixture(grid, tgrid, [(1.0, reward, drift, shifts)], terminal, sigma, quad_points,
                            policy, tie_tol)


def backward_mixture(grid: StateGrid, tgrid: TimeGrid, branches, terminal, sigma, quad_points: int = 7,
                     policy: Optional[np.ndarray] = None, tie_tol: float = TIE_TOL,
                     keep_q: bool = False) -> BackwardResult:
    """Backward recursion for a table that cannot tell its branches apart.

    Each branch ``(weight, reward, drift, shifts)`` contributes its own
    coefficients and common displacements; the action values are the
    weighted average over branches and one value table is shared. With
    `keep_q` the node-0 action values ``(G, A)`` are attached as ``q0``.
    """
    xi, w = gauss_hermite(quad_points, grid.dim)
    dt = tgrid.dt
    x = grid.points
    diffusion = np.sqrt(dt) * xi @ np.atleast_2d(sigma).T
    N = tgrid.n_steps
    value = np.empty((N + 1, grid.size))
    value[N] = terminal
    chosen = np.empty((N, grid.size), dtype=np.int64)
    clamped = np.empty((N, grid.size))
    rows = np.arange(grid.size)
    qs = None
    for j in range(N - 1, -1, -1):
        q = 0.0
        out = 0.0
        for weight, reward, drift, shifts in branches:
            b = drift(j)
            y = x[:, None, None, :] + b[:, :, None, :] * dt + diffusion[None, None] + shifts[j]
            index, wt, outside = grid.stencil(y)
            cont = np.sum(np.sum(value[j + 1][index] * wt, axis=-1) * w, axis=-1)
            q = q + weight * (reward(j) * dt + cont)
            out = out + weight * np.sum(outside * w, axis=-1)
        a = argmax_lowest(q, tie_tol) if policy is None else np.asarray(policy[j], dtype=np.int64)
        chosen[j] = a
        value[j] = q[rows, a]
        clamped[j] = out[rows, a]
        if keep_q:
            if qs is None:
                qs = np.empty((N,) + q.shape)
            qs[j] = q
    return BackwardResult(value, chosen, clamped, qs)


@dataclass
class ForwardResult:
    histograms: np.ndarray  # (N+1, G)
    clamped: np.ndarray     # (N,) mass placed on edge nodes from outside the box


def forward_pass(grid: StateGrid, tgrid: TimeGrid, policy, drift: Callable, shifts, sigma,
                 initial, quad_points: int = 7, leak_tol: float = 1e-9) -> ForwardResult:
    """Push a histogram forward under a policy table.

    ``drift(j, hist_j) -> (G, A, d)`` may read the current histogram, which lets
    self-consistent pushes use their own law in the coefficients.
    """
    xi, w = gauss_hermite(quad_points, grid.dim)
    dt = tgrid.dt
    x = grid.points
    diffusion = np.sqrt(dt) * xi @ np.atleast_2d(sigma).T
    N = tgrid.n_steps
    hist = np.empty((N + 1, grid.size))
    hist[0] = initial
    clamped = np.zeros(N)
    rows = np.arange(grid.size)
    for j in range(N):
        a = np.asarray(policy[j], dtype=np.int64)
        b = drift(j, hist[j])[rows, a]
        y = x[:, None, :] + b[:, None, :] * dt + diffusion[None] + shifts[j]
        index, weight, outside = grid.stencil(y)
        mass = hist[j][:, None] * w[None, :]
        clamped[j] = float(np.sum(mass[outside]))
        nxt = np.bincount(index.ravel(), weights=(mass[..., None] * weight).ravel(), minlength=grid.size)
        leak = abs(nxt.sum() - hist[j].sum())
        if leak > leak_tol:
            raise InternalError(f"forward push lost {leak:.3e} mass at step {j}")
        hist[j + 1] = nxt
    return ForwardResult(hist, clamped)
