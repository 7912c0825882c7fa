"""JINI: simulation-based bias-correcting estimation by the iterative bootstrap."""

from .estimators import EstimatorSpec, FitResult, fit_batch, fit_initial
from .harness import (DesignConfig, ExperimentConfig, McReport, MethodConfig, read_report,
                      run_experiment, write_report)
from .inference import CiResult, bootstrap_se, plugin_cov_logistic_mle, wald_ci
from .jini import JiniConfig, JiniResult, bbc_estimate, ib_solve, simulated_moment
from .models import (BetaRounded, Dataset, GaussianMeanToy, Logistic, MisclassifiedLogistic,
                     Pareto, UniformScaleToy)
from .numerics import Box, RngStream

__version__ = "0.1.0"

__all__ = [
    "BetaRounded", "Box", "CiResult", "Dataset", "DesignConfig", "EstimatorSpec",
    "ExperimentConfig", "FitResult", "GaussianMeanToy", "JiniConfig", "JiniResult",
    "Logistic", "McReport", "MethodConfig", "MisclassifiedLogistic", "Pareto",
    "RngStream", "UniformScaleToy", "bbc_estimate", "bootstrap_se", "fit_batch",
    "fit_initial", "ib_solve", "plugin_cov_logistic_mle", "read_report", "run_experiment",
    "simulated_moment", "wald_ci", "write_report",
]
