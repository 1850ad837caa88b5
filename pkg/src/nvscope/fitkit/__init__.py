"""Weighted nonlinear least squares with the instrument's model library."""

from .engine import FitResult, fit
from .models import MODELS, Model, NoFeatureError, get_model, initial_guess

__all__ = [
    "FitResult",
    "fit",
    "MODELS",
    "Model",
    "NoFeatureError",
    "get_model",
    "initial_guess",
]
