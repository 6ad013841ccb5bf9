"""Quasi-stationary behaviour of killed one-dimensional diffusions.

Boundary classification, a finite-volume spectral solver for the generator,
Euler-Maruyama ensembles, and convergence diagnostics for the conditioned
process and its Doob h-transform.
"""
from ._backend import BACKEND
from .model import DiffusionModel, logistic_feller_model, polynomial_drift_model

__version__ = "0.1.0"

__all__ = ["BACKEND", "DiffusionModel", "logistic_feller_model", "polynomial_drift_model"]
