"""Initial estimators and exact-likelihood benchmarks.

Every fitter has a batched core that solves the estimating equations of m
datasets sharing one design in a single damped-Newton loop; the public
``fit_*`` functions wrap it for one dataset and raise on failure. The batched
path is what the simulation-based estimators call H times per iteration.

Estimating equations are scaled by 1/n so that the convergence tolerance does
not depend on the sample size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import models as M
from .numerics import (CONVERGED, SINGULAR, STALLED, Box, FloatArray,
                       NoConvergence, digamma, expit, log_beta, newton_solve_batch,
                       trigamma, tukey_weight)

# extra batch status codes (numerics uses 0..2)
SEPARATED = 3
NONFINITE = 4
NO_WEIGHT = 5

STATUS_NAMES = {CONVERGED: "converged", SINGULAR: "singular", STALLED: "stalled",
                SEPARATED: "separation", NONFINITE: "nonfinite", NO_WEIGHT: "all_weights_zero"}

FIT_TOL = 1e-8
FIT_MAX_ITER = 100
# smallest eigenvalue of X'WX relative to X'X below which weights count as underflowed
SEPARATION_INFO = 1e-6
NWMLE_MAX_OUTER = 200
DEFAULT_PHI = 10.0
LOG_PHI_BOX = (math.log(1e-3), math.log(1e5))


class EstimationError(RuntimeError):
    pass


class Separation(EstimationError):
    pass


class DegenerateResponse(EstimationError):
    pass


class AllWeightsZero(EstimationError):
    pass


class EmptyData(EstimationError):
    pass


class IncompatibleSpec(ValueError):
    pass


LOGISTIC_MLE = "logistic_mle"
NAIVE_MISCLASSIFIED = "naive_mle_misclassified"
MISCLASSIFIED_MLE = "misclassified_mle"
BETA_NAIVE = "beta_naive_mle"
BETA_ROUNDED = "beta_rounded_mle"
NWMLE = "nwmle_tukey"
PARETO_MLE = "pareto_mle"
TOY_MLE = "toy_mle"

VARIANTS = (LOGISTIC_MLE, NAIVE_MISCLASSIFIED, MISCLASSIFIED_MLE, BETA_NAIVE,
            BETA_ROUNDED, NWMLE, PARETO_MLE, TOY_MLE)


@dataclass(frozen=True)
class EstimatorSpec:
    variant: str
    c: float | None = None
    target: str | None = None  # logistic | pareto, NWMLE only
    start: tuple[float, ...] | None = None
    tol: float = FIT_TOL
    max_iter: int = FIT_MAX_ITER

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise IncompatibleSpec(f"unknown estimator variant {self.variant!r}")
        if self.variant == NWMLE:
            if self.c is None or not self.c > 0:
                raise IncompatibleSpec("NWMLE needs a positive tuning constant c")
            if self.target not in ("logistic", "pareto"):
                raise IncompatibleSpec("NWMLE target must be 'logistic' or 'pareto'")
        if self.start is not None:
            object.__setattr__(self, "start", tuple(float(v) for v in self.start))


@dataclass(frozen=True)
class FitResult:
    estimate: FloatArray
    converged: bool
    iterations: int
    residual_norm: float
    notes: tuple[str, ...] = ()


@dataclass
class BatchFit:
    """Fits of m datasets; ``estimate`` rows are on the natural scale."""

    estimate: FloatArray
    status: np.ndarray
    iterations: np.ndarray
    residual: FloatArray
    notes: list[str] = field(default_factory=list)

    @property
    def converged(self) -> np.ndarray:
        return self.status == CONVERGED


def _outer_products(X: FloatArray) -> FloatArray:
    n, p = X.shape
    return np.einsum("ij,ik->ijk", X, X).reshape(n, p * p)


def _check_compatible(spec: EstimatorSpec, model: M.Model) -> None:
    ok = {
        LOGISTIC_MLE: (M.Logistic,),
        NAIVE_MISCLASSIFIED: (M.Logistic,),
        MISCLASSIFIED_MLE: (M.Logistic,),
        BETA_NAIVE: (M.BetaRounded,),
        BETA_ROUNDED: (M.BetaRounded,),
        PARETO_MLE: (M.Pareto,),
        TOY_MLE: (M.GaussianMeanToy, M.UniformScaleToy),
    }
    if spec.variant == NWMLE:
        allowed = (M.Logistic,) if spec.target == "logistic" else (M.Pareto,)
    else:
        allowed = ok[spec.variant]
    if not isinstance(model, allowed):
        raise IncompatibleSpec(f"{spec.variant} cannot be applied to a {model.name} model")


# ---------------------------------------------------------------------------
# Batched cores
# ---------------------------------------------------------------------------


def _finish(res) -> BatchFit:
    return BatchFit(res.x, res.status.copy(), res.iterations.copy(), res.residual.copy())


def _flag_separation(fit: BatchFit, box: Box, X: FloatArray,
                     info: FloatArray | None = None) -> None:
    """Estimates on the box edge, a singular Jacobian or underflowing weights mean separation.

    Under complete separation the score can fall below tolerance well inside
    the box, so a converged fit whose logistic information X'WX/n has lost
    rank relative to X'X/n is flagged too. ``info`` may pass that matrix
    for every fit when the solver already has it.
    """
    edge = box.on_boundary(fit.estimate)
    fit.status[edge] = SEPARATED
    fit.status[fit.status == SINGULAR] = SEPARATED
    ok = np.flatnonzero(fit.status == CONVERGED)
    if ok.size:
        n, p = X.shape
        if info is None:
            mu = expit(fit.estimate[ok, :p] @ X.T)
            info = ((mu * (1.0 - mu)) @ _outer_products(X)).reshape(-1, p, p) / n
        else:
            info = info[ok]
        scale = np.linalg.eigvalsh(X.T @ X / n)[-1]
        weak = np.linalg.eigvalsh(info)[:, 0] < SEPARATION_INFO * scale
        fit.status[ok[weak]] = SEPARATED


def logistic_mle_batch(Y: FloatArray, X: FloatArray, start: FloatArray, box: Box,
                       tol: float = FIT_TOL, max_iter: int = FIT_MAX_ITER) -> BatchFit:
    """Solve sum_i (y_i - expit(x_i'b)) x_i = 0 for every row of Y."""
    n, p = X.shape
    XX = _outer_products(X)

    def system(B, rows, need_jac=True):
        mu = expit(B @ X.T)
        g = (Y[rows] - mu) @ X / n
        w = mu * (1.0 - mu)
        J = -(w @ XX).reshape(-1, p, p) / n
        return g, J

    res = newton_solve_batch(system, start, box, tol=tol, max_iter=max_iter)
    fit = _finish(res)
    # the Jacobian held at each final iterate is exactly -X'WX/n
    _flag_separation(fit, box, X, -res.jacobian)
    return fit


def _ascent_jacobian(J_exact: FloatArray, J_fallback: FloatArray) -> FloatArray:
    """Exact Hessian where it is negative definite, the fallback elsewhere.

    Far from the optimum an indefinite Hessian sends Newton toward saddle
    points; a negative-definite surrogate still points uphill.
    """
    finite = np.all(np.isfinite(J_exact), axis=(1, 2))
    ok = np.zeros(J_exact.shape[0], dtype=bool)
    if finite.any():
        ok[finite] = np.linalg.eigvalsh(J_exact[finite])[:, -1] < 0
    return np.where(ok[:, None, None], J_exact, J_fallback)


def misclassified_mle_batch(Y, X, start, box, fpr: float, fnr: float,
                            tol=FIT_TOL, max_iter=FIT_MAX_ITER) -> BatchFit:
    """Exact-likelihood MLE of the misclassified logistic model."""
    n, p = X.shape
    XX = _outer_products(X)
    c = 1.0 - fpr - fnr

    def probs(B):
        mu = expit(B @ X.T)
        return mu, fpr + c * mu, (1.0 - fpr) - c * mu

    def system(B, rows, need_jac=True):
        mu, pz, qz = probs(B)
        v = c * mu * (1.0 - mu)
        pq = pz * qz
        r = Y[rows] - pz
        g = (r * v / pq) @ X / n
        if not need_jac:
            return g, None
        dv = v * (1.0 - 2.0 * mu)
        h = -v * v / pq + r * (dv / pq - v * v * (qz - pz) / (pq * pq))
        J = (h @ XX).reshape(-1, p, p) / n
        fisher = -((v * v / pq) @ XX).reshape(-1, p, p) / n
        return g, _ascent_jacobian(J, fisher)

    def loglik(B, rows):
        _, pz, qz = probs(B)
        y = Y[rows]
        with np.errstate(divide="ignore"):
            return np.sum(y * np.log(pz) + (1.0 - y) * np.log(qz), axis=1)

    res = newton_solve_batch(system, start, box, tol=tol, max_iter=max_iter, objective=loglik)
    fit = _finish(res)
    _flag_separation(fit, box, X)
    return fit


def transform_unit_interval(y: FloatArray, n: int) -> FloatArray:
    """Squeeze responses into (0, 1): y -> (y (n - 1) + 0.5) / n."""
    return (np.asarray(y, dtype=float) * (n - 1) + 0.5) / n


def _beta_box(p: int) -> Box:
    return Box(np.r_[np.full(p, -M.BETA_BOUND), LOG_PHI_BOX[0]],
               np.r_[np.full(p, M.BETA_BOUND), LOG_PHI_BOX[1]])


def _to_log_phi(theta: FloatArray, p: int) -> FloatArray:
    out = np.array(theta, dtype=float)
    out[..., p] = np.log(out[..., p])
    return out


def _from_log_phi(z: FloatArray, p: int) -> FloatArray:
    out = np.array(z, dtype=float)
    out[..., p] = np.exp(out[..., p])
    return out


def _beta_shapes(Z, X):
    """(mu, phi, a, b, saturated-row mask) with saturated rows neutralised."""
    p = X.shape[1]
    return _beta_shapes_eta(Z[:, :p] @ X.T, Z[:, p])


def _beta_shapes_eta(eta, tau):
    mu = expit(eta)
    phi = np.exp(tau)[:, None]
    a = mu * phi
    b = (1.0 - mu) * phi
    # a mean of exactly 0 or 1 zeroes a shape parameter; those rows are
    # evaluated at a dummy point and reported as NaN
    sat = ~np.all((a > 0) & (b > 0) & np.isfinite(a) & np.isfinite(b), axis=1)
    a = np.where(sat[:, None], 1.0, a)
    b = np.where(sat[:, None], 1.0, b)
    return mu, phi, a, b, sat


def beta_naive_batch(Y, X, start, tol=FIT_TOL, max_iter=FIT_MAX_ITER) -> BatchFit:
    """Beta-regression MLE of transformed grid responses, Newton in (beta, log phi).

    ``start`` and the returned estimates use the natural (beta, phi) scale.
    """
    n, p = X.shape
    XX = _outer_products(X)
    Yt = transform_unit_interval(Y, n)
    logy = np.log(Yt)
    log1m = np.log1p(-Yt)
    ystar = logy - log1m

    def system(Z, rows, need_jac=True):
        mu, phi, a, b, sat = _beta_shapes(Z, X)
        m = mu * (1.0 - mu)
        psi_a, psi_b, psi_phi = digamma(a), digamma(b), digamma(phi)
        resid = ystar[rows] - (psi_a - psi_b)
        u = mu * resid + log1m[rows] - psi_b + psi_phi
        g = np.empty((len(rows), p + 1))
        g[:, :p] = (phi * m * resid) @ X / n
        g[:, p] = np.sum(phi * u, axis=1) / n
        g[sat] = np.nan
        if not need_jac:
            return g, None
        tri_a, tri_b, tri_phi = trigamma(a), trigamma(b), trigamma(phi)
        info_ee = phi * phi * m * m * (tri_a + tri_b)
        info_et = phi * m * (a * tri_a - b * tri_b)
        info_tt = phi * (mu * a * tri_a + (1.0 - mu) * b * tri_b - phi * tri_phi)

        def assemble(h_ee, h_et, h_tt):
            J = np.empty((len(rows), p + 1, p + 1))
            J[:, :p, :p] = (h_ee @ XX).reshape(-1, p, p) / n
            J[:, :p, p] = h_et @ X / n
            J[:, p, :p] = J[:, :p, p]
            J[:, p, p] = np.sum(h_tt, axis=1) / n
            return J

        exact = assemble(phi * m * (1.0 - 2.0 * mu) * resid - info_ee,
                         phi * m * resid - info_et,
                         phi * u - info_tt)
        fisher = assemble(-info_ee, -info_et, -info_tt)
        return g, _ascent_jacobian(exact, fisher)

    def loglik(Z, rows):
        mu, phi, a, b, sat = _beta_shapes(Z, X)
        ll = np.sum(-np.asarray(log_beta(a, b)) + (a - 1.0) * logy[rows]
                    + (b - 1.0) * log1m[rows], axis=1)
        return np.where(sat, -np.inf, ll)

    box = _beta_box(p)
    z0 = box.project(_to_log_phi(np.atleast_2d(start), p))
    res = newton_solve_batch(system, z0, box, tol=tol, max_iter=max_iter, objective=loglik)
    fit = _finish(res)
    fit.status[box.on_boundary(fit.estimate) & (fit.status == CONVERGED)] = STALLED
    degenerate = np.all(Y == Y[:, :1], axis=1)
    fit.status[degenerate] = NONFINITE
    fit.estimate = _from_log_phi(fit.estimate, p)
    return fit


def _rounded_beta_parts(eta, tau, Y):
    """Per-observation log interval probability and score factors.

    Takes the linear predictor eta (m, n) and tau = log phi (m,). Returns
    (loglik (m,), r_eta (m, n), r_tau (m, n)); the score in (beta, log phi)
    is the sum over i of (r_eta x_i, r_tau). Rows with a saturated mean or an
    underflowed probability come back as NaN.
    """
    mu, phi, a, b, sat = _beta_shapes_eta(eta, tau)
    lo, hi = M.grid_cells(Y)
    prob, da, db = M.beta_interval_prob(lo, hi, a, b)
    bad = sat | ~np.all(prob > 0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        la, lb = da / prob, db / prob
        ll = np.sum(np.log(prob), axis=1)
    r_eta = phi * mu * (1.0 - mu) * (la - lb)
    r_tau = a * la + b * lb
    ll[bad] = np.nan
    r_eta[bad] = np.nan
    r_tau[bad] = np.nan
    return ll, r_eta, r_tau


def _rounded_beta_gradient(Z, Y, X):
    """Mean interval-likelihood score in (beta, log phi) for each row of Z."""
    n, p = X.shape
    _, r_eta, r_tau = _rounded_beta_parts(Z[:, :p] @ X.T, Z[:, p], Y)
    return np.c_[r_eta @ X / n, np.sum(r_tau, axis=1) / n]


def beta_rounded_batch(Y, X, start, tol=FIT_TOL, max_iter=FIT_MAX_ITER,
                       fd_step: float = 1e-6) -> BatchFit:
    """Interval-likelihood MLE of rounded beta responses.

    Each observation's score depends on the parameters only through
    (eta_i, tau), so the Jacobian is assembled from central differences of
    the analytic score factors in those two directions. It only steers
    Newton; convergence is judged on the analytic score. Where it is not
    negative definite the outer product of per-observation scores stands in.
    """
    n, p = X.shape
    d = p + 1
    XX = _outer_products(X)

    def system(Z, rows, need_jac=True):
        Yr = Y[rows]
        eta, tau = Z[:, :p] @ X.T, Z[:, p]
        if not need_jac:
            _, r_eta, r_tau = _rounded_beta_parts(eta, tau, Yr)
            return np.c_[r_eta @ X / n, np.sum(r_tau, axis=1) / n], None
        # base point and the four perturbed points in one vectorised call
        h = fd_step
        k = len(rows)
        _, re, rt = _rounded_beta_parts(
            np.concatenate([eta, eta + h, eta - h, eta, eta]),
            np.concatenate([tau, tau, tau, tau + h, tau - h]),
            np.concatenate([Yr] * 5))
        re, rt = re.reshape(5, k, n), rt.reshape(5, k, n)
        r_eta, r_tau = re[0], rt[0]
        g = np.c_[r_eta @ X / n, np.sum(r_tau, axis=1) / n]
        de_eta, dt_eta = (re[1] - re[2]) / (2 * h), (rt[1] - rt[2]) / (2 * h)
        de_tau, dt_tau = (re[3] - re[4]) / (2 * h), (rt[3] - rt[4]) / (2 * h)
        J = np.empty((len(rows), d, d))
        J[:, :p, :p] = (de_eta @ XX).reshape(-1, p, p) / n
        J[:, :p, p] = 0.5 * (de_tau + dt_eta) @ X / n
        J[:, p, :p] = J[:, :p, p]
        J[:, p, p] = np.sum(dt_tau, axis=1) / n
        S = np.concatenate([r_eta[:, :, None] * X[None], r_tau[:, :, None]], axis=2)
        opg = -np.einsum("mij,mik->mjk", S, S) / n
        J = np.where(np.isfinite(J), J, 0.0)
        return g, _ascent_jacobian(J, opg)

    def loglik(Z, rows):
        ll = _rounded_beta_parts(Z[:, :p] @ X.T, Z[:, p], Y[rows])[0]
        return np.where(np.isfinite(ll), ll, -np.inf)

    box = _beta_box(p)
    z0 = box.project(_to_log_phi(np.atleast_2d(start), p))
    res = newton_solve_batch(system, z0, box, tol=tol, max_iter=max_iter, objective=loglik)
    fit = _finish(res)
    fit.status[~np.isfinite(fit.residual)] = NONFINITE
    fit.estimate = _from_log_phi(fit.estimate, p)
    return fit


def pareto_mle_batch(Y, X, start, tol=FIT_TOL, max_iter=FIT_MAX_ITER) -> BatchFit:
    """gamma = min(y); beta solves sum_i (1 - alpha_i log(y_i/gamma)) x_i = 0."""
    n, p = X.shape
    XX = _outer_products(X)
    gamma = Y.min(axis=1)
    L = np.log(Y / gamma[:, None])

    def system(B, rows, need_jac=True):
        al = np.exp(B @ X.T) * L[rows]
        g = (1.0 - al) @ X / n
        J = -(al @ XX).reshape(-1, p, p) / n
        return g, J

    box = Box.uniform(p, -M.BETA_BOUND, M.BETA_BOUND)
    res = newton_solve_batch(system, np.atleast_2d(start)[:, :p], box, tol=tol, max_iter=max_iter)
    fit = _finish(res)
    fit.estimate = np.c_[fit.estimate, gamma]
    return fit


def _nwmle_batch(Y, X, start, c, kind: str, tol=FIT_TOL, max_iter=FIT_MAX_ITER,
                 max_outer=NWMLE_MAX_OUTER) -> BatchFit:
    """Tukey-weighted score solved by weight/score alternation.

    Weights w_i = tukey(||s_i||, c) are frozen at the current iterate while a
    Newton solve handles the weighted score; the loop stops once the full
    weight-inclusive equation is below ``tol``.
    """
    n, p = X.shape
    XX = _outer_products(X)
    xnorm = np.sqrt(np.einsum("ij,ij->i", X, X))
    if kind == "pareto":
        gamma = Y.min(axis=1)
        L = np.log(Y / gamma[:, None])

    def parts(B, rows):
        # per-observation score factor r (s_i = r_i x_i) and Jacobian weight h
        if kind == "logistic":
            mu = expit(B @ X.T)
            return Y[rows] - mu, -mu * (1.0 - mu)
        al = np.exp(B @ X.T) * L[rows]
        return 1.0 - al, -al

    def distance(B, rows, r):
        # norm of the full per-observation score; for Pareto it includes d/dgamma = alpha_i / gamma
        d = np.abs(r) * xnorm
        if kind == "pareto":
            d = np.hypot(d, np.exp(B @ X.T) / gamma[rows, None])
        return d

    m = Y.shape[0]
    box = Box.uniform(p, -M.BETA_BOUND, M.BETA_BOUND)
    B = box.project(np.atleast_2d(start)[:, :p]).copy()
    status = np.full(m, -1)
    iters = np.zeros(m, dtype=int)
    resid = np.full(m, np.inf)
    all_rows = np.arange(m)
    W = np.empty((m, n))

    for _ in range(max_outer):
        act = all_rows[status == -1]
        if act.size == 0:
            break
        r, _h = parts(B[act], act)
        W[act] = tukey_weight(distance(B[act], act, r), c)
        g = (W[act] * r) @ X / n
        resid[act] = np.max(np.abs(g), axis=1)
        status[act[resid[act] <= tol]] = CONVERGED
        status[act[~np.any(W[act] > 0, axis=1)]] = NO_WEIGHT
        act = all_rows[status == -1]
        if act.size == 0:
            break

        # inner solve on the active rows; sub indexes into act
        def system(Bs, sub, need_jac=True, _act=act):
            rows = _act[sub]
            rr, hh = parts(Bs, rows)
            Wr = W[rows]
            return (Wr * rr) @ X / n, ((Wr * hh) @ XX).reshape(-1, p, p) / n

        res = newton_solve_batch(system, B[act], box, tol=0.1 * tol, max_iter=max_iter)
        B[act] = res.x
        iters[act] += res.iterations
        status[act[res.status == SINGULAR]] = SINGULAR

    # final composite residual for rows still running
    act = all_rows[status == -1]
    if act.size:
        r, _h = parts(B[act], act)
        Wl = tukey_weight(distance(B[act], act, r), c)
        resid[act] = np.max(np.abs((Wl * r) @ X / n), axis=1)
        status[act] = np.where(resid[act] <= tol, CONVERGED, STALLED)

    fit = BatchFit(B, status, iters, resid)
    if kind == "logistic":
        _flag_separation(fit, box, X)
    else:
        fit.estimate = np.c_[B, gamma]
    return fit


def toy_batch(Y: FloatArray, model: M.Model) -> BatchFit:
    if Y.shape[1] == 0:
        raise EmptyData("toy estimator needs at least one observation")
    est = Y.mean(axis=1) if isinstance(model, M.GaussianMeanToy) else Y.max(axis=1)
    m = Y.shape[0]
    return BatchFit(est[:, None], np.zeros(m, dtype=int), np.zeros(m, dtype=int), np.zeros(m))


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def default_start(spec: EstimatorSpec, model: M.Model, Y: FloatArray) -> FloatArray:
    """Start rows for a batch of responses: beta = 0, phi = 10, gamma = min(y)."""
    m = Y.shape[0]
    if spec.start is not None:
        return np.tile(np.asarray(spec.start, dtype=float), (m, 1))
    if isinstance(model, M.BetaRounded):
        return np.tile(np.r_[np.zeros(model.p), DEFAULT_PHI], (m, 1))
    if isinstance(model, M.Pareto):
        return np.c_[np.zeros((m, model.p)), Y.min(axis=1)]
    return np.zeros((m, model.dim))


def fit_batch(spec: EstimatorSpec, model: M.Model, Y: FloatArray,
              start: FloatArray | None = None) -> BatchFit:
    """Fit the initial estimator to each row of ``Y`` (shape (m, n))."""
    _check_compatible(spec, model)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if start is None:
        start = default_start(spec, model, Y)
    start = np.atleast_2d(np.asarray(start, dtype=float))
    if start.shape[0] == 1 and Y.shape[0] > 1:
        start = np.tile(start, (Y.shape[0], 1))
    v = spec.variant
    tol, mi = spec.tol, spec.max_iter
    if v == TOY_MLE:
        return toy_batch(Y, model)
    X = model.design
    if v in (LOGISTIC_MLE, NAIVE_MISCLASSIFIED):
        return logistic_mle_batch(Y, X, start, model.box, tol, mi)
    if v == MISCLASSIFIED_MLE:
        return misclassified_mle_batch(Y, X, start, model.box, model.fpr, model.fnr, tol, mi)
    if v == BETA_NAIVE:
        return beta_naive_batch(Y, X, start, tol, mi)
    if v == BETA_ROUNDED:
        return beta_rounded_batch(Y, X, start, tol, mi)
    if v == PARETO_MLE:
        return pareto_mle_batch(Y, X, start, tol, mi)
    return _nwmle_batch(Y, X, start, spec.c, spec.target, tol, mi)


_ERRORS: dict[int, Callable[[str], Exception]] = {
    SEPARATED: Separation,
    NO_WEIGHT: AllWeightsZero,
}


def _single(spec: EstimatorSpec, model: M.Model, data: M.Dataset,
            start=None) -> FitResult:
    if data.n == 0:
        raise EmptyData("dataset has no observations")
    if data.kind != model.response_kind:
        raise M.DatasetError(f"{spec.variant} needs {model.response_kind} responses, got {data.kind}")
    Y = data.responses[None, :]
    if spec.variant in (BETA_NAIVE,) and np.all(Y == Y[0, 0]):
        raise DegenerateResponse("all responses are equal")
    if spec.variant == BETA_ROUNDED:
        # surface underflow at the start as an explicit error
        z0 = default_start(spec, model, Y) if start is None else np.atleast_2d(start)
        if not np.all(np.isfinite(_rounded_beta_gradient(_to_log_phi(z0, model.p), Y, model.design))):
            raise M.NonFiniteLikelihood("an interval probability underflowed at the start value")
    fit = fit_batch(spec, model, Y, start)
    status = int(fit.status[0])
    x = fit.estimate[0]
    if status == CONVERGED:
        return FitResult(x, True, int(fit.iterations[0]), float(fit.residual[0]), tuple(fit.notes))
    raise status_error(spec.variant, status, float(fit.residual[0]), x)


def status_error(variant: str, status: int, residual: float = math.nan, x=None) -> Exception:
    """The exception matching a failed batch status."""
    if status in _ERRORS:
        return _ERRORS[status](f"{variant}: {STATUS_NAMES[status]}")
    if status == NONFINITE:
        if variant == BETA_NAIVE:
            return DegenerateResponse("all responses are equal")
        return M.NonFiniteLikelihood(f"{variant}: likelihood is not finite")
    return NoConvergence(f"{variant}: {STATUS_NAMES.get(status, 'failed')} "
                         f"(residual {residual:.3g})", x)


def fit_logistic_mle(data: M.Dataset, design: FloatArray, start=None) -> FitResult:
    model = M.Logistic(design)
    return _single(EstimatorSpec(LOGISTIC_MLE), model, data, start)


def fit_misclassified_mle(data: M.Dataset, fpr: float, fnr: float, start=None,
                          design: FloatArray | None = None) -> FitResult:
    design = data.design if design is None else design
    model = M.MisclassifiedLogistic(design, fpr=fpr, fnr=fnr)
    return _single(EstimatorSpec(MISCLASSIFIED_MLE), model, data, start)


def fit_beta_naive_mle(data: M.Dataset, design: FloatArray, start=None) -> FitResult:
    return _single(EstimatorSpec(BETA_NAIVE), M.BetaRounded(design), data, start)


def fit_beta_rounded_mle(data: M.Dataset, design: FloatArray, start=None) -> FitResult:
    return _single(EstimatorSpec(BETA_ROUNDED), M.BetaRounded(design), data, start)


def fit_nwmle(data: M.Dataset, target: M.Model, c: float, start=None) -> FitResult:
    kind = "pareto" if isinstance(target, M.Pareto) else "logistic"
    return _single(EstimatorSpec(NWMLE, c=c, target=kind), target, data, start)


def fit_pareto_mle(data: M.Dataset, design: FloatArray, start=None) -> FitResult:
    return _single(EstimatorSpec(PARETO_MLE), M.Pareto(design), data, start)


def fit_toy(data: M.Dataset, model: M.Model) -> FitResult:
    if not isinstance(model, (M.GaussianMeanToy, M.UniformScaleToy)):
        raise IncompatibleSpec("fit_toy needs a toy model")
    if data.n == 0:
        raise EmptyData("dataset has no observations")
    fit = toy_batch(data.responses[None, :], model)
    return FitResult(fit.estimate[0], True, 0, 0.0)


def fit_initial(spec: EstimatorSpec, model: M.Model, data: M.Dataset) -> FitResult:
    """Dispatch to the fitter named by ``spec``."""
    _check_compatible(spec, model)
    if spec.variant == TOY_MLE:
        return fit_toy(data, model)
    return _single(spec, model, data, None)


def estimating_equation(spec: EstimatorSpec, model: M.Model, data: M.Dataset,
                        estimate) -> FloatArray:
    """Mean estimating function at ``estimate`` (natural scale); zero at the fit."""
    _check_compatible(spec, model)
    Y = data.responses[None, :]
    est = np.atleast_2d(np.asarray(estimate, dtype=float))
    v = spec.variant
    if v == TOY_MLE:
        raise IncompatibleSpec("toy estimators are closed form")
    X = model.design
    n, p = X.shape
    if v in (LOGISTIC_MLE, NAIVE_MISCLASSIFIED):
        return ((Y - expit(est @ X.T)) @ X / n)[0]
    if v == MISCLASSIFIED_MLE:
        mu = expit(est @ X.T)
        c = 1.0 - model.fpr - model.fnr
        pz = model.fpr + c * mu
        qz = (1.0 - model.fpr) - c * mu
        return (((Y - pz) * c * mu * (1 - mu) / (pz * qz)) @ X / n)[0]
    if v == BETA_ROUNDED:
        return _rounded_beta_gradient(_to_log_phi(est, p), Y, X)[0]
    if v == BETA_NAIVE:
        Yt = transform_unit_interval(Y, n)
        z = _to_log_phi(est, p)
        mu = expit(z[:, :p] @ X.T)
        phi = np.exp(z[:, p])[:, None]
        a, b = mu * phi, (1 - mu) * phi
        resid = np.log(Yt) - np.log1p(-Yt) - (digamma(a) - digamma(b))
        u = mu * resid + np.log1p(-Yt) - digamma(b) + digamma(phi)
        return np.concatenate([((phi * mu * (1 - mu) * resid) @ X / n)[0],
                               [np.sum(phi * u) / n]])
    if isinstance(model, M.Pareto):
        L = np.log(Y / est[:, p:p + 1])
        r = 1.0 - np.exp(est[:, :p] @ X.T) * L
    else:
        r = Y - expit(est[:, :p] @ X.T)
    if v == PARETO_MLE:
        return (r @ X / n)[0]
    d = np.abs(r) * np.sqrt(np.einsum("ij,ij->i", X, X))
    if isinstance(model, M.Pareto):
        d = np.hypot(d, np.exp(est[:, :p] @ X.T) / est[:, p:p + 1])
    w = tukey_weight(d, spec.c)
    return ((w * r) @ X / n)[0]
