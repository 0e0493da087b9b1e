"""Hierarchical-likelihood estimation for nonlinear mixed-effects ODE models."""

__version__ = "0.1.0"

from .errors import (ConfigError, DampingOverflow, DomainError, FiniteDifferenceFailure,
                     HlodeError, NoInfectedEquilibrium, NonConvergence, SingularInnerBlock,
                     StepSizeUnderflow, TooFewConverged)
from .hlik import PenaltyConfig, hl_total
from .model import HivProblem, ModelSpec, read_dataset, simulate_dataset, write_dataset
from .optimizer import fit, global_fit, hybrid_fit, patient_fit
from .inference import confidence_intervals, sandwich, wald_contrast
from .bootstrap import bias_correct, inflate_variance

__all__ = [
    "ConfigError", "DampingOverflow", "DomainError", "FiniteDifferenceFailure", "HlodeError",
    "NoInfectedEquilibrium", "NonConvergence", "SingularInnerBlock", "StepSizeUnderflow",
    "TooFewConverged", "PenaltyConfig", "hl_total", "HivProblem", "ModelSpec", "read_dataset",
    "simulate_dataset", "write_dataset", "fit", "global_fit", "hybrid_fit", "patient_fit",
    "confidence_intervals", "sandwich", "wald_contrast", "bias_correct", "inflate_variance",
]
