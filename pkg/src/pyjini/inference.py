"""Parametric-bootstrap standard errors and Wald confidence intervals."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, Union

import numpy as np

from . import models as M
from .estimators import EstimationError, EstimatorSpec, fit_batch, status_error
from .jini import FAILURE_LIMIT, Divergence, TooManyFailures
from .numerics import FloatArray, NoConvergence, RngStream, SingularJacobian, expit

log = logging.getLogger(__name__)

DEFAULT_B = 100

# errors that count as a failed refit rather than a bug
REFIT_ERRORS = (EstimationError, NoConvergence, SingularJacobian, TooManyFailures,
                Divergence, M.NonFiniteLikelihood, M.ModelError, ArithmeticError)


class DegenerateVariance(ArithmeticError):
    pass


class SingularInformation(ArithmeticError):
    pass


@dataclass(frozen=True)
class CiResult:
    lower: FloatArray
    upper: FloatArray
    level: float
    se: FloatArray
    B: int = 0

    def covers(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return (self.lower <= theta) & (theta <= self.upper)

    @property
    def length(self) -> FloatArray:
        return self.upper - self.lower


@dataclass(frozen=True)
class BootstrapResult:
    se: FloatArray
    cov: FloatArray
    B: int
    failures: int
    replicates: FloatArray


# method(responses, index, stream) -> estimate; raises one of REFIT_ERRORS on failure
Refit = Callable[[FloatArray, int, RngStream], FloatArray]


def _as_refit(model: M.Model, method: Union[Refit, EstimatorSpec]) -> Refit:
    if isinstance(method, EstimatorSpec):
        spec = method

        def refit(y, b, stream):
            fit = fit_batch(spec, model, y[None, :])
            if not fit.converged[0]:
                raise status_error(spec.variant, int(fit.status[0]), float(fit.residual[0]))
            return fit.estimate[0]

        return refit
    return method


def bootstrap_se(model: M.Model, theta_hat, method: Union[Refit, EstimatorSpec],
                 B: int = DEFAULT_B, streams: RngStream | None = None) -> BootstrapResult:
    """Parametric bootstrap: refit ``method`` on B samples drawn at theta_hat.

    Sample b is drawn from ``streams.child("sample", b)`` and the method gets
    ``streams.child("method", b)`` for any simulation of its own, so the
    bootstrap is reproducible and independent of the observed-data streams.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    if streams is None:
        raise ValueError("bootstrap_se needs a stream")
    theta_hat = model.check_theta(theta_hat)
    refit = _as_refit(model, method)
    reps = []
    failures = 0
    for b in range(B):
        y = model.simulate_block(theta_hat, streams.child("sample", b), 1)[0]
        try:
            est = np.asarray(refit(y, b, streams.child("method", b)), dtype=float)
        except REFIT_ERRORS as exc:
            log.debug("bootstrap refit %d failed: %s", b, exc)
            failures += 1
            continue
        if not np.all(np.isfinite(est)):
            failures += 1
            continue
        reps.append(est)
    if failures > FAILURE_LIMIT * B:
        raise TooManyFailures(f"{failures} of {B} bootstrap refits failed", failures, B)
    R = np.array(reps)
    cov = np.atleast_2d(np.cov(R, rowvar=False, ddof=1))
    se = np.sqrt(np.diag(cov))
    if np.any(se == 0):
        raise DegenerateVariance("a bootstrap standard error is zero")
    return BootstrapResult(se, cov, len(reps), failures, R)


_STD_NORMAL = NormalDist()


def normal_quantile(p: float) -> float:
    return _STD_NORMAL.inv_cdf(p)


def wald_ci(theta_hat, se, level: float = 0.95, B: int = 0) -> CiResult:
    """theta_hat -/+ z_{(1+level)/2} se."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    theta_hat = np.asarray(theta_hat, dtype=float)
    se = np.asarray(se, dtype=float)
    if np.any(~(se > 0)):
        raise ValueError("standard errors must be positive")
    half = normal_quantile(0.5 + level / 2.0) * se
    return CiResult(theta_hat - half, theta_hat + half, level, se, B)


def plugin_cov_logistic_mle(design, theta_hat) -> FloatArray:
    """Inverse Fisher information (X' W X)^{-1}, W = diag(mu (1 - mu))."""
    X = np.asarray(design, dtype=float)
    mu = expit(X @ np.asarray(theta_hat, dtype=float))
    info = X.T @ (X * (mu * (1.0 - mu))[:, None])
    if np.linalg.cond(info) > 1e12:
        raise SingularInformation("Fisher information is numerically singular")
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)
