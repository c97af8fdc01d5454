"""Distributional gradient boosting with parametric and Bernstein-flow heads."""

from dgbm.boosting import DistributionalModel, FitConfig, fit, load_model, predict_raw, save_model
from dgbm.gbt import TreeParams
from dgbm.heads import BernsteinFlowHead, GaussianHead
from dgbm.metrics import coverage, crps_quantile_integration, crps_samples, quantile_loss

__version__ = "0.1.0"

__all__ = [
    "BernsteinFlowHead",
    "DistributionalModel",
    "FitConfig",
    "GaussianHead",
    "TreeParams",
    "coverage",
    "crps_quantile_integration",
    "crps_samples",
    "fit",
    "load_model",
    "predict_raw",
    "quantile_loss",
    "save_model",
]
