"""JINI by iterative bootstrap, and the bootstrap bias-corrected estimator.

The moment map pi(theta, n) is the expectation of the initial estimator on
size-n samples from F_theta. It is approximated by the average over H
simulated samples; under the ``common`` seed policy the same H samples are
reused at every iterate, which makes the iteration map deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import models as M
from .estimators import EstimatorSpec, fit_batch
from .numerics import FloatArray, RngStream

log = logging.getLogger(__name__)

DEFAULT_H = 200
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 200
FAILURE_LIMIT = 0.2
DIVERGENCE_FACTOR = 10.0
STALL_PATIENCE = 10
MIN_DAMPING = 1.0 / 16

SEED_POLICIES = ("common", "fresh")


class TooManyFailures(RuntimeError):
    def __init__(self, message: str, failures: int, total: int):
        super().__init__(message)
        self.failures = failures
        self.total = total


class Divergence(RuntimeError):
    def __init__(self, message: str, result: "JiniResult"):
        super().__init__(message)
        self.result = result


class Unsupported(ValueError):
    pass


@dataclass(frozen=True)
class JiniConfig:
    H: int = DEFAULT_H
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL
    damping: float = 1.0
    seed_policy: str = "common"
    base_seed: int = 0
    keep_trajectory: bool = False

    def __post_init__(self) -> None:
        if self.H < 1:
            raise ValueError("H must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.seed_policy not in SEED_POLICIES:
            raise ValueError(f"seed_policy must be one of {SEED_POLICIES}")

    def streams(self) -> RngStream:
        return RngStream(self.base_seed, ("jini",))


@dataclass
class MomentResult:
    value: FloatArray
    failures: int
    H: int


@dataclass
class JiniResult:
    estimate: FloatArray
    iterations: int
    final_step_norm: float
    moment_residual: FloatArray
    converged: bool
    trajectory: list[FloatArray] | None = None
    notes: list[str] = field(default_factory=list)
    failures: int = 0


def simulated_moment(model: M.Model, estimator: EstimatorSpec, theta, H: int,
                     streams: RngStream) -> MomentResult:
    """Average of the initial estimator over H samples simulated at theta.

    Sample h is row h of the (H, n) block drawn from ``streams``, so the
    first H samples are the same whatever H is. Inner fits start at theta.
    Fits that fail are dropped; more than 20% failures is an error.
    """
    theta = model.check_theta(theta)
    Y = model.simulate_block(theta, streams, H)
    fit = fit_batch(estimator, model, Y, theta[None, :])
    ok = fit.converged
    failures = int(H - ok.sum())
    if failures > FAILURE_LIMIT * H:
        raise TooManyFailures(f"{failures} of {H} simulated fits failed", failures, H)
    value = np.mean(fit.estimate[ok], axis=0)
    return MomentResult(value, failures, H)


def analytic_moment(model: M.Model, theta, n: int | None = None) -> FloatArray:
    """Exact expectation of the toy initial estimators."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    n = model.n if n is None else n
    if isinstance(model, M.GaussianMeanToy):
        return theta.copy()
    if isinstance(model, M.UniformScaleToy):
        return theta * n / (n + 1.0)
    raise Unsupported(f"no closed-form moment for {model.name}")


MomentFn = Callable[[FloatArray, int], MomentResult]


def _moment_fn(model, estimator, cfg: JiniConfig, moment: str,
               streams: RngStream | None) -> MomentFn:
    if moment == "analytic":
        return lambda theta, k: MomentResult(analytic_moment(model, theta), 0, 0)
    if moment != "simulated":
        raise ValueError("moment must be 'simulated' or 'analytic'")
    root = cfg.streams() if streams is None else streams

    def fn(theta, k):
        s = root if cfg.seed_policy == "common" else root.child("iteration", k)
        return simulated_moment(model, estimator, theta, cfg.H, s)

    return fn


def _iterate(pi_obs, theta0, box, fn: MomentFn, cfg: JiniConfig, damping: float):
    """Run the damped iteration; returns (result, diverged, final damping).

    With a discrete response the simulated moment map is piecewise constant
    and the full step can cycle around the root. When the best step norm has
    not improved for STALL_PATIENCE iterations the damping is halved (down
    to MIN_DAMPING) and the iteration restarts from the best iterate.
    """
    theta = theta0
    traj = [theta.copy()] if cfg.keep_trajectory else None
    first = None
    best, best_theta, since = np.inf, theta0, 0
    failures = 0
    for k in range(cfg.max_iter):
        mom = fn(theta, k)
        failures += mom.failures
        step = pi_obs - mom.value
        norm = float(np.max(np.abs(step)))
        if first is None:
            first = norm
        # the residual belongs to theta, so report theta rather than the
        # next iterate: re-evaluating the moment there reproduces it exactly
        res = JiniResult(theta, k + 1, norm, step, norm <= cfg.tol, traj, [], failures)
        if res.converged:
            return res, False, damping
        if first > 0 and norm > DIVERGENCE_FACTOR * first:
            return res, True, damping
        nxt = theta + damping * step
        if norm < best:
            best, best_theta, since = norm, theta, 0
        else:
            since += 1
            if since >= STALL_PATIENCE and damping > MIN_DAMPING:
                damping /= 2
                since = 0
                nxt = best_theta
        theta = box.project(nxt)
        if traj is not None:
            traj.append(theta.copy())
    return res, False, damping


def ib_solve(pi_obs, model: M.Model, estimator: EstimatorSpec | None, cfg: JiniConfig,
             moment: str = "simulated", streams: RngStream | None = None,
             start=None) -> JiniResult:
    """Solve pi_obs = pi(theta, n) by the iterative bootstrap.

    theta_{k+1} = Proj[theta_k + damping (pi_obs - pi(theta_k))], starting from
    the projection of pi_obs (or ``start``). Stops when the undamped step is
    below ``cfg.tol`` in sup-norm. If the step grows tenfold the solve is
    retried once with half the damping before Divergence is raised; a stalled
    iteration halves its damping in place.
    """
    pi_obs = np.asarray(pi_obs, dtype=float).reshape(-1)
    if not np.all(np.isfinite(pi_obs)):
        raise ValueError("pi_obs must be finite")
    if pi_obs.size != model.dim:
        raise ValueError(f"pi_obs has {pi_obs.size} coordinates, model has {model.dim}")
    box = model.box
    theta0 = box.project(pi_obs if start is None else np.asarray(start, dtype=float))
    fn = _moment_fn(model, estimator, cfg, moment, streams)
    res, diverged, damping = _iterate(pi_obs, theta0, box, fn, cfg, cfg.damping)
    if diverged:
        log.info("IB step grew tenfold; retrying with damping %.3g", cfg.damping / 2)
        res, diverged, damping = _iterate(pi_obs, theta0, box, fn, cfg, cfg.damping / 2)
        res.notes.append(f"restarted with damping {cfg.damping / 2:g}")
        if diverged:
            raise Divergence("IB diverged after halving the damping", res)
    if damping < cfg.damping:
        res.notes.append(f"damping reduced to {damping:g} after stalling")
    if not res.converged:
        res.notes.append(f"no convergence in {cfg.max_iter} iterations")
    if res.failures:
        res.notes.append(f"{res.failures} simulated fits dropped")
    return res


def bbc_estimate(pi_obs, model: M.Model, estimator: EstimatorSpec | None, H: int,
                 streams: RngStream | None = None, moment: str = "simulated") -> FloatArray:
    """2 pi_obs - pi(pi_obs, n): one bootstrap bias correction."""
    pi_obs = np.asarray(pi_obs, dtype=float).reshape(-1)
    if not model.box.contains(pi_obs):
        raise ValueError("BBC simulates at pi_obs, which must lie in the parameter box")
    if moment == "analytic":
        return 2.0 * pi_obs - analytic_moment(model, pi_obs)
    if streams is None:
        raise ValueError("simulated BBC needs a stream")
    return 2.0 * pi_obs - simulated_moment(model, estimator, pi_obs, H, streams).value
