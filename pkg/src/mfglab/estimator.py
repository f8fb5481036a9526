"""Estimator interface over the mean field solver.

`MeanFieldEquilibrium` follows the scikit-learn conventions: constructor
arguments are stored verbatim, `fit` learns from a sample of initial states
and sets trailing-underscore attributes, and `predict` and `score` check
that the estimator is fitted.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError
from .grids import StateGrid, TimeGrid
from .mfe import default_state_grid, exploitability, solve_mfe
from .model import InitialLaw, builtin_model
from .sde import sample_scenarios


class MeanFieldEquilibrium(BaseEstimator):
    """Mean field equilibrium of a builtin game for an observed initial population.

    Parameters
    ----------
    model : str
        Builtin model name.
    model_params : dict, optional
        Parameter overrides for the builtin.
    n_steps : int
        Time steps of the equilibrium grid.
    n_scenarios : int
        Number of common-noise scenarios solved.
    scenario_seed : int
        Seed of the scenario stream.
    state_bins : int
        Grid nodes per dimension.
    state_lower, state_upper : float, optional
        Outermost grid nodes; by default a box around the fitted initial mean.
    damping, tol, max_iter : float, float, int
        Picard settings.
    quad_points : int
        Gauss-Hermite points per dimension.

    Attributes
    ----------
    solution_ : MfeSolution
    spec_ : ModelSpec
        The model with its initial law replaced by the fitted Gaussian.
    n_features_in_ : int
    exploitability_ : ndarray of shape (n_scenarios,)
    """

    def __init__(self, model: str = "lq_monotone", model_params: Optional[dict] = None, n_steps: int = 25,
                 n_scenarios: int = 8, scenario_seed: int = 11, state_bins: int = 61,
                 state_lower: Optional[float] = None, state_upper: Optional[float] = None,
                 damping: float = 0.5, tol: float = 1e-3, max_iter: int = 50, quad_points: int = 7):
        self.model = model
        self.model_params = model_params
        self.n_steps = n_steps
        self.n_scenarios = n_scenarios
        self.scenario_seed = scenario_seed
        self.state_bins = state_bins
        self.state_lower = state_lower
        self.state_upper = state_upper
        self.damping = damping
        self.tol = tol
        self.max_iter = max_iter
        self.quad_points = quad_points

    def _grid(self, spec) -> StateGrid:
        if self.state_lower is None or self.state_upper is None:
            return default_state_grid(spec, int(self.state_bins))
        d = spec.dim
        return StateGrid.uniform(np.full(d, float(self.state_lower)), np.full(d, float(self.state_upper)),
                                 np.full(d, int(self.state_bins)))

    def fit(self, X, y=None):
        """Solve the equilibrium for initial states distributed like `X`.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
            Initial states; their mean and covariance define the initial law.
        y : ignored
        """
        X = check_array(X, ensure_min_samples=2)
        base = builtin_model(self.model, self.model_params)
        if X.shape[1] != base.dim:
            raise ConfigurationError(f"model {self.model!r} has dimension {base.dim}, X has {X.shape[1]} columns")
        cov = np.atleast_2d(np.cov(X, rowvar=False))
        self.spec_ = base.replace(initial_law=InitialLaw(X.mean(axis=0), cov))
        tgrid = TimeGrid(self.spec_.horizon, int(self.n_steps))
        scenarios = sample_scenarios(int(self.n_scenarios), tgrid, self.spec_.dim, int(self.scenario_seed))
        self.solution_ = solve_mfe(self.spec_, scenarios, self._grid(self.spec_), float(self.damping),
                                   float(self.tol), int(self.max_iter), quad_points=int(self.quad_points))
        self.exploitability_ = np.array([exploitability(self.spec_, self.solution_, sc)
                                         for sc in self.solution_.scenarios])
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "solution_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(f"X has {X.shape[1]} features, the estimator was fitted with "
                                     f"{self.n_features_in_}")
        return X

    def predict(self, X, t: float = 0.0, scenario: Optional[int] = None) -> np.ndarray:
        """Equilibrium action vectors at time `t` for states `X`.

        Returns an array of shape (n_samples, action_dim). `scenario` defaults
        to the first solved scenario.
        """
        X = self._check(X)
        sol = self.solution_
        sid = sol.scenario_ids[0] if scenario is None else int(scenario)
        node = int(np.clip(np.floor(t / sol.time_grid.dt + 1e-9), 0, sol.time_grid.n_steps - 1))
        idx = sol.policy_table().action_at(node, X, sid)
        return self.spec_.actions[idx]

    def score(self, X, y=None) -> float:
        """Scenario-averaged equilibrium value at the states `X`, averaged over rows."""
        X = self._check(X)
        sol = self.solution_
        bins = sol.state_grid.nearest(X)
        total = 0.0
        for sc in sol.scenarios:
            total += sc.weight * float(np.mean(sol[sc.scenario_id].value[0][bins]))
        return total
