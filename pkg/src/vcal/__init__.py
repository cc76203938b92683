"""Variational calibration of computer models with random-feature Gaussian process approximations."""
from .bench import (
    BoreholeProblem,
    Illustrative1DProblem,
    analytic_theta_posterior,
    borehole_eta,
    make_borehole_dataset,
    make_illustrative_dataset,
    mse_metric,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    DomainError,
    ModeError,
    NonFiniteError,
    ShapeError,
    ValidationError,
    VcalError,
)
from .model import CalibrationDataset, CalibrationModel, NoiseParams, build_model
from .rff import KernelParams, RandomFeatureLayer, build_layer, empirical_kernel, feature_map
from .svi import VariationalPosterior, elbo, make_priors
from .trainer import StageSpec, calibrate, default_schedule

__version__ = "0.1.0"

__all__ = [
    "analytic_theta_posterior",
    "borehole_eta",
    "BoreholeProblem",
    "build_layer",
    "build_model",
    "calibrate",
    "CalibrationDataset",
    "CalibrationModel",
    "CheckpointError",
    "ConfigError",
    "default_schedule",
    "DivergenceError",
    "DomainError",
    "elbo",
    "empirical_kernel",
    "feature_map",
    "Illustrative1DProblem",
    "KernelParams",
    "make_borehole_dataset",
    "make_illustrative_dataset",
    "make_priors",
    "ModeError",
    "mse_metric",
    "NoiseParams",
    "NonFiniteError",
    "RandomFeatureLayer",
    "ShapeError",
    "StageSpec",
    "ValidationError",
    "VariationalPosterior",
    "VcalError",
]
