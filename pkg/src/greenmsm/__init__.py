"""Continuous-time multi-state models for greenhouse yield panels."""

__version__ = "0.1.0"

from .errors import ConfigError, ImpossibleTransitionError, InputError, ModelError, NumericalError
from .model import ModelSpec, ParameterSet, assemble_generator
from .matexp import transition_probability_matrix
from .likelihood import LikelihoodEvaluator, PanelDataset, total_log_likelihood
from .optim import FitOptions, FitResult, fit

__all__ = [
    "ConfigError",
    "FitOptions",
    "FitResult",
    "ImpossibleTransitionError",
    "InputError",
    "LikelihoodEvaluator",
    "ModelError",
    "ModelSpec",
    "NumericalError",
    "PanelDataset",
    "ParameterSet",
    "assemble_generator",
    "fit",
    "total_log_likelihood",
    "transition_probability_matrix",
]
