"""Collision-rate estimation for car-following scenarios by importance sampling
with a risk-tilted normalizing-flow proposal."""

from .errors import ConfigError, DataError, NumericalError, RareFlowError
from .estimator import EstimationReport, crude_estimate, is_estimate, required_n, PlannerInput
from .gmm import Gmm, fit_gmm
from .flow import Flow, make_flow, train_flow
from .scenario import Scene, Maneuver, Scenario

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "NumericalError", "RareFlowError",
    "EstimationReport", "crude_estimate", "is_estimate", "required_n", "PlannerInput",
    "Gmm", "fit_gmm", "Flow", "make_flow", "train_flow", "Scene", "Maneuver", "Scenario",
]
