"""Numerical laboratory for n-player mean field games with common noise."""
__version__ = "0.1.0"

from .exceptions import (ConfigurationError, DependencyError, DivergenceError, DomainError, EvaluationError,
                         InternalError, MfgLabError, ResourceError, UnsupportedModelError)
from .grids import StateGrid, TimeGrid
from .measures import MeasureFlow, MeasureSummary, flow_distance, wasserstein
from .model import ModelSpec, builtin_model, null_model, validate_assumptions
from .mfe import MfeSolution, picard_iterate, solve_mfe

__all__ = [
    "__version__", "ConfigurationError", "DependencyError", "DivergenceError", "DomainError", "EvaluationError",
    "InternalError", "MfgLabError", "ResourceError", "UnsupportedModelError", "StateGrid", "TimeGrid",
    "MeasureFlow", "MeasureSummary", "flow_distance", "wasserstein", "ModelSpec", "builtin_model", "null_model",
    "validate_assumptions", "MfeSolution", "picard_iterate", "solve_mfe", "MeanFieldEquilibrium",
]


def __getattr__(name):
    # the estimator pulls in scikit-learn; load it on first use
    if name == "MeanFieldEquilibrium":
        from .estimator import MeanFieldEquilibrium
        return MeanFieldEquilibrium
    raise AttributeError(name)
