"""Heralded TCSPC fluorescence-lifetime simulation and reconvolution fitting."""

from .core import (
    DecayModel,
    GaussianIRF,
    Histogram,
    TabulatedIRF,
    TimeAxis,
    convolve,
    emg_closed_form,
    eval_decay,
    normalize,
    subtract_background,
)
from .fitting import FitParams, FitResult, chi_squared_reduced, fit_lifetime, model_histogram
from .simulate import ExperimentConfig, simulate_experiment
from .studies import drift_inflation, min_lifetime_scan, photon_budget, scaling_study

__version__ = "0.1.0"

__all__ = [
    "DecayModel", "GaussianIRF", "Histogram", "TabulatedIRF", "TimeAxis", "convolve",
    "emg_closed_form", "eval_decay", "normalize", "subtract_background", "FitParams",
    "FitResult", "chi_squared_reduced", "fit_lifetime", "model_histogram",
    "ExperimentConfig", "simulate_experiment", "drift_inflation", "min_lifetime_scan",
    "photon_budget", "scaling_study",
]
