"""Numerical kernels shared by every estimator.

Special functions are vectorised over numpy arrays. The Newton solver works on
a batch of independent root-finding problems at once so that the thousands of
small fits needed by simulation-based estimators cost a handful of array
operations each.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

FloatArray = NDArray[np.float64]

# Newton defaults
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 100
MAX_HALVINGS = 30
MAX_CONDITION = 1e12


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


class SingularJacobian(ArithmeticError):
    def __init__(self, message: str, x: FloatArray, record: "NewtonRecord | None" = None):
        super().__init__(message)
        self.x = x
        self.record = record


class NoConvergence(ArithmeticError):
    def __init__(self, message: str, x: FloatArray, record: "NewtonRecord | None" = None):
        super().__init__(message)
        self.x = x
        self.record = record


# ---------------------------------------------------------------------------
# Box constraints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned parameter box; infinite bounds are allowed."""

    lower: FloatArray
    upper: FloatArray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have the same length")
        if not np.all(lo < hi):
            raise ValueError("box requires lower < upper in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, dim: int, lower: float, upper: float) -> "Box":
        return cls(np.full(dim, lower), np.full(dim, upper))

    @property
    def dim(self) -> int:
        return self.lower.size

    def project(self, x: ArrayLike) -> FloatArray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def contains(self, x: ArrayLike) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def on_boundary(self, x: ArrayLike) -> NDArray[np.bool_]:
        """Per-row flag: any coordinate sits on a finite bound."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.any((x <= self.lower) | (x >= self.upper), axis=-1)

    def concat(self, other: "Box") -> "Box":
        return Box(np.concatenate([self.lower, other.lower]),
                   np.concatenate([self.upper, other.upper]))


# ---------------------------------------------------------------------------
# Elementary and special functions
# ---------------------------------------------------------------------------


def expit(x: ArrayLike) -> FloatArray | float:
    """Logistic function 1 / (1 + exp(-x)), overflow safe."""
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    out = np.where(x >= 0, r, e * r)
    return out if out.ndim else float(out)


def log_expit(x: ArrayLike) -> FloatArray | float:
    """log(expit(x)) without cancellation for large negative x."""
    x = np.asarray(x, dtype=float)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_positive(x: FloatArray, name: str) -> None:
    if np.any(~(x > 0)):
        raise DomainError(f"{name} requires strictly positive arguments")


def _lanczos_log_gamma(x: FloatArray) -> FloatArray:
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS_COEF[0])
    for i, c in enumerate(_LANCZOS_COEF[1:], start=1):
        acc = acc + c / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def log_gamma(x: ArrayLike) -> FloatArray | float:
    """Natural log of the gamma function for x > 0 (Lanczos, g=7)."""
    x = np.asarray(x, dtype=float)
    _check_positive(x, "log_gamma")
    small = x < 0.5
    # lgamma(x) = lgamma(x + 1) - log(x) moves small arguments into range
    xs = np.where(small, x + 1.0, x)
    out = _lanczos_log_gamma(xs)
    out = np.where(small, out - np.log(x), out)
    return out if out.ndim else float(out)


def log_beta(a: ArrayLike, b: ArrayLike) -> FloatArray | float:
    return np.asarray(log_gamma(a)) + np.asarray(log_gamma(b)) - np.asarray(log_gamma(np.add(a, b)))


_SHIFT = 6.0


def digamma(x: ArrayLike) -> FloatArray | float:
    """Derivative of log_gamma: recurrence up to x >= 6, then asymptotic series."""
    x = np.asarray(x, dtype=float)
    _check_positive(x, "digamma")
    acc = np.zeros_like(x)
    z = x.copy()
    for _ in range(int(_SHIFT)):
        low = z < _SHIFT
        if not np.any(low):
            break
        acc = np.where(low, acc - 1.0 / z, acc)
        z = np.where(low, z + 1.0, z)
    inv2 = 1.0 / (z * z)
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12))))))
    out = acc + np.log(z) - 0.5 / z - series
    return out if out.ndim else float(out)


def trigamma(x: ArrayLike) -> FloatArray | float:
    """Second derivative of log_gamma."""
    x = np.asarray(x, dtype=float)
    _check_positive(x, "trigamma")
    acc = np.zeros_like(x)
    z = x.copy()
    for _ in range(int(_SHIFT)):
        low = z < _SHIFT
        if not np.any(low):
            break
        acc = np.where(low, acc + 1.0 / (z * z), acc)
        z = np.where(low, z + 1.0, z)
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (
        1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * (691.0 / 2730 - inv2 * 7.0 / 6))))))
    out = acc + series
    return out if out.ndim else float(out)


_CF_TINY = 1e-300
_CF_EPS = 1e-16
_CF_MAX_ITER = 20000


def _beta_cf(x: FloatArray, a: FloatArray, b: FloatArray) -> FloatArray:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
    d = 1.0 / d
    h = d.copy()
    done = np.zeros(x.shape, dtype=bool)
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2.0 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        h = np.where(done, h, h * d * c)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(done, h, h * delta)
        done |= np.abs(delta - 1.0) < _CF_EPS
        if done.all():
            break
    return h


def _check_beta_args(x: FloatArray, a: FloatArray, b: FloatArray) -> None:
    if np.any(~((x >= 0) & (x <= 1))):
        raise DomainError("reg_inc_beta requires 0 <= x <= 1")
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DomainError("reg_inc_beta requires a > 0 and b > 0")


def reg_inc_beta(x: ArrayLike, a: ArrayLike, b: ArrayLike) -> FloatArray | float:
    """Regularized incomplete beta I_x(a, b) via continued fraction."""
    x, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, a, b)))
    _check_beta_args(x, a, b)
    interior = (x > 0) & (x < 1)
    xi = np.where(interior, x, 0.5)
    log_front = (a * np.log(xi) + b * np.log1p(-xi)
                 - np.asarray(log_beta(a, b)))
    front = np.exp(log_front)
    direct = xi < (a + 1.0) / (a + b + 2.0)
    xs = np.where(direct, xi, 1.0 - xi)
    as_ = np.where(direct, a, b)
    bs = np.where(direct, b, a)
    cf = _beta_cf(xs, as_, bs)
    tail = front * cf / as_
    out = np.where(direct, tail, 1.0 - tail)
    out = np.where(interior, out, np.where(x >= 1, 1.0, 0.0))
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


_SERIES_MAX_TERMS = 20000


def _inc_beta_series_grad(x: FloatArray, a: FloatArray, b: FloatArray):
    """I_x(a,b) and its partials for x below the mean-switch point.

    Uses I = x^a (1-x)^b / (a B(a,b)) * sum_k t_k with
    t_{k+1} = t_k x (a+b+k) / (a+1+k); the parameter derivatives of each term
    are accumulated alongside.
    """
    t = np.ones_like(x)
    total = np.ones_like(x)
    sa = np.zeros_like(x)  # d log t_k / da
    sb = np.zeros_like(x)  # d log t_k / db
    dfa = np.zeros_like(x)
    dfb = np.zeros_like(x)
    for k in range(_SERIES_MAX_TERMS):
        sa = sa + 1.0 / (a + b + k) - 1.0 / (a + 1.0 + k)
        sb = sb + 1.0 / (a + b + k)
        t = t * x * (a + b + k) / (a + 1.0 + k)
        total = total + t
        dfa = dfa + t * sa
        dfb = dfb + t * sb
        if np.all(t <= 1e-17 * total):
            break
    log_front = (a * np.log(x) + b * np.log1p(-x) - np.log(a)
                 - np.asarray(log_beta(a, b)))
    value = np.exp(log_front) * total
    psi_ab = np.asarray(digamma(a + b))
    dlog_a = np.log(x) - 1.0 / a - np.asarray(digamma(a)) + psi_ab + dfa / total
    dlog_b = np.log1p(-x) - np.asarray(digamma(b)) + psi_ab + dfb / total
    return value, value * dlog_a, value * dlog_b


def reg_inc_beta_grad(x: ArrayLike, a: ArrayLike, b: ArrayLike):
    """Return (I_x(a,b), dI/da, dI/db), the partials computed by series."""
    x, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, a, b)))
    _check_beta_args(x, a, b)
    interior = (x > 0) & (x < 1)
    xi = np.where(interior, x, 0.5)
    direct = xi <= (a + 1.0) / (a + b + 2.0)
    xs = np.where(direct, xi, 1.0 - xi)
    as_ = np.where(direct, a, b)
    bs = np.where(direct, b, a)
    v, ga, gb = _inc_beta_series_grad(xs, as_, bs)
    value = np.where(direct, v, 1.0 - v)
    da = np.where(direct, ga, -gb)
    db = np.where(direct, gb, -ga)
    value = np.where(interior, value, np.where(x >= 1, 1.0, 0.0))
    da = np.where(interior, da, 0.0)
    db = np.where(interior, db, 0.0)
    return value, da, db


def tukey_weight(d: ArrayLike, c: float) -> FloatArray | float:
    """Tukey biweight {1 - (d/c)^2}^2 for d <= c, else 0."""
    if not c > 0:
        raise ValueError("tuning constant c must be positive")
    d = np.asarray(d, dtype=float)
    u = d / c
    out = np.where(d <= c, (1.0 - u * u) ** 2, 0.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Damped Newton
# ---------------------------------------------------------------------------


@dataclass
class NewtonRecord:
    iterations: int
    residual: float
    halvings: int
    converged: bool


# status codes for batched solves
RUNNING, CONVERGED, SINGULAR, STALLED = -1, 0, 1, 2

# system(x, rows, need_jac) -> (residual (m, p), jacobian (m, p, p) or None)
BatchSystem = Callable[[FloatArray, NDArray[np.intp], bool], "tuple[FloatArray, FloatArray | None]"]
# objective(x, rows) -> (m,) values to increase, e.g. a log-likelihood
BatchObjective = Callable[[FloatArray, NDArray[np.intp]], FloatArray]


@dataclass
class BatchNewtonResult:
    x: FloatArray
    status: NDArray[np.int_]
    iterations: NDArray[np.int_]
    halvings: NDArray[np.int_]
    residual: FloatArray
    jacobian: FloatArray | None = None  # at x, for rows whose Jacobian was evaluated there

    @property
    def converged(self) -> NDArray[np.bool_]:
        return self.status == CONVERGED


def _batch_inverse(J: FloatArray) -> FloatArray:
    try:
        return np.linalg.inv(J)
    except np.linalg.LinAlgError:
        out = np.full_like(J, np.nan)
        for i in range(J.shape[0]):
            try:
                out[i] = np.linalg.inv(J[i])
            except np.linalg.LinAlgError:
                pass
        return out


def newton_solve_batch(system: BatchSystem, x0: ArrayLike, box: Box, *,
                       tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                       max_halvings: int = MAX_HALVINGS,
                       objective: BatchObjective | None = None) -> BatchNewtonResult:
    """Solve m independent systems g(x) = 0 by damped Newton.

    ``system(x, rows, need_jac)`` returns the residuals for the given batch
    rows and, when ``need_jac`` is true, their Jacobians (it may return them
    regardless). A step is accepted once it lowers ||g||_2, or raises
    ``objective`` when one is supplied (fitters pass the log-likelihood so that
    ascent steps far from the optimum are not rejected). Rejected steps are
    halved up to ``max_halvings`` times. Iterates are projected into ``box``.
    """
    x = box.project(np.atleast_2d(np.asarray(x0, dtype=float))).copy()
    m = x.shape[0]
    rows = np.arange(m)
    g, J = system(x, rows, True)
    g = np.array(g, dtype=float)
    J = np.array(J, dtype=float)
    sq = np.einsum("ij,ij->i", g, g)
    sq = np.where(np.isfinite(sq), sq, np.inf)
    obj = None
    if objective is not None:
        obj = np.asarray(objective(x, rows), dtype=float)
        obj = np.where(np.isfinite(obj), obj, -np.inf)
    status = np.full(m, RUNNING)
    iters = np.zeros(m, dtype=int)
    halvings = np.zeros(m, dtype=int)

    for _ in range(max_iter):
        resid = np.max(np.abs(g), axis=1)
        status[(status == RUNNING) & (resid <= tol)] = CONVERGED
        act = np.flatnonzero(status == RUNNING)
        if act.size == 0:
            break
        Jinv = _batch_inverse(J[act])
        cond = (np.abs(J[act]).sum(axis=1).max(axis=1)
                * np.abs(Jinv).sum(axis=1).max(axis=1))
        bad = ~np.isfinite(cond) | (cond > MAX_CONDITION)
        status[act[bad]] = SINGULAR
        keep = ~bad
        act, Jinv = act[keep], Jinv[keep]
        if act.size == 0:
            break
        step = -np.einsum("ijk,ik->ij", Jinv, g[act])
        t = np.ones(act.size)
        pending = np.arange(act.size)
        for _h in range(max_halvings + 1):
            r = act[pending]
            trial = box.project(x[r] + t[pending, None] * step[pending])
            gt, Jt = system(trial, r, False)
            sq_t = np.einsum("ij,ij->i", gt, gt)
            ok = np.isfinite(sq_t) & (sq_t < sq[r])
            if obj is not None:
                ob_t = np.asarray(objective(trial, r), dtype=float)
                ok = np.isfinite(sq_t) & (ok | (np.isfinite(ob_t) & (ob_t > obj[r])))
            acc = r[ok]
            if acc.size:
                if Jt is None:
                    _, Jt_acc = system(trial[ok], acc, True)
                else:
                    Jt_acc = Jt[ok]
                x[acc], g[acc], J[acc], sq[acc] = trial[ok], gt[ok], Jt_acc, sq_t[ok]
                if obj is not None:
                    obj[acc] = ob_t[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            t[pending] *= 0.5
            halvings[act[pending]] += 1
        iters[act] += 1
        status[act[pending]] = STALLED

    resid = np.max(np.abs(g), axis=1)
    status[(status == RUNNING) & (resid <= tol)] = CONVERGED
    status[status == RUNNING] = STALLED
    return BatchNewtonResult(x, status, iters, halvings, resid, J)


def newton_solve(gradient: Callable[[FloatArray], ArrayLike],
                 jacobian: Callable[[FloatArray], ArrayLike],
                 x0: ArrayLike, box: Box, tol: float = NEWTON_TOL,
                 max_iter: int = NEWTON_MAX_ITER) -> tuple[FloatArray, NewtonRecord]:
    """Find a root of ``gradient`` inside ``box`` by damped Newton.

    Raises SingularJacobian when the 1-norm condition estimate of the
    Jacobian exceeds 1e12 and NoConvergence after ``max_iter`` iterations or
    exhausted step halving; both carry the last iterate.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if not box.contains(x0):
        raise ValueError("x0 must lie inside the box")

    def system(x: FloatArray, rows: NDArray[np.intp], need_jac: bool):
        g = np.asarray(gradient(x[0]), dtype=float).reshape(1, -1)
        if not need_jac:
            return g, None
        J = np.asarray(jacobian(x[0]), dtype=float).reshape(1, g.shape[1], g.shape[1])
        return g, J

    res = newton_solve_batch(system, x0[None, :], box, tol=tol, max_iter=max_iter)
    record = NewtonRecord(int(res.iterations[0]), float(res.residual[0]),
                          int(res.halvings[0]), bool(res.converged[0]))
    x = res.x[0]
    if res.status[0] == SINGULAR:
        raise SingularJacobian("Jacobian condition estimate above 1e12", x, record)
    if res.status[0] != CONVERGED:
        raise NoConvergence(f"no root after {record.iterations} iterations "
                            f"(residual {record.residual:.3g})", x, record)
    return x, record


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

_U64 = (1 << 64) - 1


def _label(value: int | str) -> int:
    if isinstance(value, str):
        digest = hashlib.blake2b(value.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(value) & _U64


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream named by a seed and a label path.

    The generator is Philox keyed through numpy's SeedSequence hashing of
    (base_seed, path), so any two distinct paths give independent streams and
    the same path always replays the same numbers.
    """

    base_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_seed", int(self.base_seed) & _U64)
        object.__setattr__(self, "path", tuple(_label(v) for v in self.path))

    def child(self, *labels: int | str) -> "RngStream":
        return RngStream(self.base_seed, self.path + tuple(_label(v) for v in labels))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.base_seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def uniform(self, size: int | Sequence[int]) -> FloatArray:
        return self.generator().random(size)

    def normal(self, size: int | Sequence[int]) -> FloatArray:
        return self.generator().standard_normal(size)


def derive_stream(base_seed: int, path: Sequence[int | str] = ()) -> RngStream:
    return RngStream(base_seed, tuple(path))


@lru_cache(maxsize=512)
def _cached_block(base_seed: int, path: tuple[int, ...], kind: str,
                  shape: tuple[int, ...]) -> FloatArray:
    rng = RngStream(base_seed, path).generator()
    block = rng.random(shape) if kind == "uniform" else rng.standard_normal(shape)
    block.setflags(write=False)
    return block


def uniform_block(stream: RngStream, shape: tuple[int, ...]) -> FloatArray:
    """Read-only uniform draws for ``stream``; memoised since replays are identical."""
    return _cached_block(stream.base_seed, stream.path, "uniform", tuple(shape))


def normal_block(stream: RngStream, shape: tuple[int, ...]) -> FloatArray:
    return _cached_block(stream.base_seed, stream.path, "normal", tuple(shape))
