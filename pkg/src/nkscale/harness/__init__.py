"""Scaling experiments, metrics and reporting."""

from nkscale.harness.metrics import accuracy, average_precision, evaluate, mean_average_precision, mse, spearman
from nkscale.harness.report import report, write_csv
from nkscale.harness.scaling import ExperimentConfig, PowerLawFit, ScalingResult, fit_power_law, scaling_run

__all__ = [
    "ExperimentConfig",
    "PowerLawFit",
    "ScalingResult",
    "accuracy",
    "average_precision",
    "evaluate",
    "fit_power_law",
    "mean_average_precision",
    "mse",
    "report",
    "scaling_run",
    "spearman",
    "write_csv",
]
