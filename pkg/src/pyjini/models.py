"""Simulable parametric families.

Each model is an immutable dataclass that knows how to draw responses for a
batch of H samples at once (``simulate_block``), its mean function and, where
tractable, its exact log-likelihood with analytic gradient.

Parameter layouts:

* ``Logistic``, ``MisclassifiedLogistic``: theta = beta (p)
* ``BetaRounded``: theta = (beta, phi)
* ``Pareto``: theta = (beta, gamma)
* toy models: theta has a single coordinate
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np

from .numerics import (Box, FloatArray, RngStream, digamma, expit, log_beta,
                       log_expit, normal_block, reg_inc_beta, reg_inc_beta_grad,
                       uniform_block)

BETA_BOUND = 50.0
GRID_STEP = 0.1
GRID_HALF_WIDTH = 0.05
GRID = np.round(np.arange(11) * GRID_STEP, 10)
CUTS = np.round(np.arange(10) * GRID_STEP + GRID_HALF_WIDTH, 10)


class ModelError(ValueError):
    pass


class HeavyTail(ModelError):
    """Pareto mean requested with tail index <= 1."""


class NonFiniteLikelihood(ArithmeticError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    responses: FloatArray
    design: FloatArray | None = field(repr=False)
    kind: str  # binary | grid | positive | real

    @property
    def n(self) -> int:
        return int(self.responses.shape[0])


def round_to_grid(y):
    """Round latent responses in (0, 1) onto {0, 0.1, ..., 1}.

    j/10 is returned for j/10 - 0.05 <= y < j/10 + 0.05; the end cells are
    truncated to [0, 0.05) and [0.95, 1].
    """
    y = np.asarray(y, dtype=float)
    # 10 y lands exactly on k + 0.5 at the cell edges; y / 0.1 does not
    j = np.clip(np.floor(10.0 * y + 0.5), 0, 10).astype(int)
    out = GRID[j]
    return out if out.ndim else float(out)


def _check_design(X: FloatArray) -> FloatArray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ModelError("design must be a 2-D matrix")
    if X.shape[0] <= X.shape[1]:
        raise ModelError("design needs more rows than columns")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ModelError("design is not of full column rank")
    X = X.copy()
    X.setflags(write=False)
    return X


class Model:
    """Common interface; concrete families below."""

    response_kind: ClassVar[str] = "real"
    name: ClassVar[str] = "model"
    n: int
    box: Box

    @property
    def dim(self) -> int:
        return self.box.dim

    def check_theta(self, theta) -> FloatArray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.dim:
            raise ModelError(f"{self.name} expects {self.dim} parameters, got {theta.size}")
        if not self.box.contains(theta):
            raise ModelError(f"parameter outside the {self.name} parameter box")
        return theta

    def simulate_block(self, theta, stream: RngStream, size: int) -> FloatArray:
        """Responses for ``size`` independent samples, shape (size, n)."""
        raise NotImplementedError

    def simulate(self, theta, stream: RngStream) -> Dataset:
        y = self.simulate_block(theta, stream, 1)[0]
        return Dataset(np.array(y), getattr(self, "design", None), self.response_kind)

    def mean_response(self, theta, row_index: int = 0) -> float:
        raise NotImplementedError

    def log_likelihood(self, theta, data: Dataset) -> tuple[float, FloatArray]:
        raise NotImplementedError(f"no tractable likelihood for {self.name}")

    def dataset(self, y) -> Dataset:
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.n:
            raise DatasetError(f"expected {self.n} responses, got {y.size}")
        return Dataset(y, getattr(self, "design", None), self.response_kind)

    def _check_data(self, data: Dataset) -> None:
        if data.kind != self.response_kind:
            raise DatasetError(f"{self.name} needs {self.response_kind} responses, got {data.kind}")
        if data.n != self.n:
            raise DatasetError("dataset size does not match the design")


# ---------------------------------------------------------------------------
# Binary regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Logistic(Model):
    design: FloatArray = field(repr=False)
    box: Box = None  # type: ignore[assignment]

    response_kind: ClassVar[str] = "binary"
    name: ClassVar[str] = "logistic"

    def __post_init__(self) -> None:
        X = _check_design(self.design)
        object.__setattr__(self, "design", X)
        if self.box is None:
            object.__setattr__(self, "box", Box.uniform(X.shape[1], -BETA_BOUND, BETA_BOUND))

    @property
    def n(self) -> int:  # type: ignore[override]
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    # misclassification rates; plain logistic has none
    fpr: ClassVar[float] = 0.0
    fnr: ClassVar[float] = 0.0

    def observed_prob(self, eta):
        mu = expit(eta)
        return self.fpr + (1.0 - self.fpr - self.fnr) * mu

    def mean_response(self, theta, row_index: int = 0) -> float:
        theta = self.check_theta(theta)
        return float(self.observed_prob(self.design[row_index] @ theta))

    def simulate_block(self, theta, stream, size):
        theta = self.check_theta(theta)
        prob = self.observed_prob(self.design @ theta)
        u = uniform_block(stream, (size, self.n))
        return (u < prob).astype(float)

    def log_likelihood(self, theta, data):
        self._check_data(data)
        theta = self.check_theta(theta)
        y = data.responses
        eta = self.design @ theta
        c = 1.0 - self.fpr - self.fnr
        if self.fpr == 0.0 and self.fnr == 0.0:
            ll = float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))
            grad = self.design.T @ (y - expit(eta))
            return ll, grad
        mu = expit(eta)
        pz = self.fpr + c * mu
        # 1 - pz written without cancellation
        qz = (1.0 - self.fpr) - c * mu
        with np.errstate(divide="ignore"):
            ll = float(np.sum(y * np.log(pz) + (1 - y) * np.log(qz)))
        if not np.isfinite(ll):
            raise NonFiniteLikelihood("observed-response probability underflowed")
        r = (y - pz) / (pz * qz)
        grad = self.design.T @ (r * c * mu * (1 - mu))
        return ll, grad


@dataclass(frozen=True, eq=False)
class MisclassifiedLogistic(Logistic):
    """Logistic response observed through fixed false positive/negative rates."""

    fpr: float = 0.0  # type: ignore[misc]
    fnr: float = 0.0  # type: ignore[misc]

    name: ClassVar[str] = "misclassified_logistic"

    def __post_init__(self) -> None:
        super().__post_init__()
        if not (0 <= self.fpr < 1 and 0 <= self.fnr < 1):
            raise ModelError("misclassification rates must lie in [0, 1)")
        if self.fpr + self.fnr >= 1:
            raise ModelError("fpr + fnr must be below 1 for identifiability")


# ---------------------------------------------------------------------------
# Beta regression with rounded responses
# ---------------------------------------------------------------------------


def beta_interval_prob(lo, hi, a, b):
    """P(lo <= Y < hi) for Y ~ Beta(a, b) and its partials in (a, b).

    Cells lying above the mean are evaluated through the complementary tail
    to avoid subtracting two numbers close to one.
    """
    lo, hi, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lo, hi, a, b)))
    upper = lo > a / (a + b)
    x1 = np.where(upper, 1.0 - hi, lo)
    x2 = np.where(upper, 1.0 - lo, hi)
    pa = np.where(upper, b, a)
    pb = np.where(upper, a, b)
    i1, d1a, d1b = reg_inc_beta_grad(x1, pa, pb)
    i2, d2a, d2b = reg_inc_beta_grad(x2, pa, pb)
    prob = i2 - i1
    dpa = d2a - d1a
    dpb = d2b - d1b
    da = np.where(upper, dpb, dpa)
    db = np.where(upper, dpa, dpb)
    return prob, da, db


def grid_cells(y):
    """Interval [lo, hi) of latent values that round to each grid response."""
    y = np.asarray(y, dtype=float)
    lo = np.clip(y - GRID_HALF_WIDTH, 0.0, 1.0)
    hi = np.clip(y + GRID_HALF_WIDTH, 0.0, 1.0)
    return lo, hi


@dataclass(frozen=True, eq=False)
class BetaRounded(Model):
    design: FloatArray = field(repr=False)
    box: Box = None  # type: ignore[assignment]
    grid_step: float = GRID_STEP
    half_width: float = GRID_HALF_WIDTH

    response_kind: ClassVar[str] = "grid"
    name: ClassVar[str] = "beta_rounded"

    def __post_init__(self) -> None:
        X = _check_design(self.design)
        object.__setattr__(self, "design", X)
        if self.grid_step != GRID_STEP or self.half_width != GRID_HALF_WIDTH:
            raise ModelError("only the 0.1 grid with half-width 0.05 is supported")
        if self.box is None:
            box = Box(np.r_[np.full(X.shape[1], -BETA_BOUND), 1e-3],
                      np.r_[np.full(X.shape[1], BETA_BOUND), 1e5])
            object.__setattr__(self, "box", box)

    @property
    def n(self) -> int:  # type: ignore[override]
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def shape_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        mu = expit(self.design @ theta[: self.p])
        phi = theta[self.p]
        return mu * phi, (1.0 - mu) * phi

    def mean_response(self, theta, row_index: int = 0) -> float:
        theta = self.check_theta(theta)
        return float(expit(self.design[row_index] @ theta[: self.p]))

    def cell_cdf(self, theta) -> FloatArray:
        """Latent CDF at the ten cell cut points, shape (n, 10)."""
        a, b = self.shape_params(theta)
        return np.asarray(reg_inc_beta(CUTS[None, :], a[:, None], b[:, None]))

    def simulate_block(self, theta, stream, size):
        # Inverse CDF of the latent beta followed by rounding: the latent
        # exceeds cut k exactly when U >= F(cut k), so only the CDF at the
        # cut points is needed.
        theta = self.check_theta(theta)
        F = self.cell_cdf(theta)
        u = uniform_block(stream, (size, self.n))
        j = np.zeros(u.shape, dtype=np.intp)
        for k in range(CUTS.size):
            j += u >= F[:, k]
        return GRID[j]

    def log_likelihood(self, theta, data):
        """Exact interval likelihood of the rounded responses.

        The gradient is with respect to (beta, phi) on the natural scale.
        """
        self._check_data(data)
        theta = self.check_theta(theta)
        a, b = self.shape_params(theta)
        lo, hi = grid_cells(data.responses)
        prob, da, db = beta_interval_prob(lo, hi, a, b)
        if np.any(~(prob > 0)):
            raise NonFiniteLikelihood("an interval probability underflowed to zero")
        ll = float(np.sum(np.log(prob)))
        mu = expit(self.design @ theta[: self.p])
        phi = theta[self.p]
        dl_da = da / prob
        dl_db = db / prob
        g_beta = self.design.T @ ((dl_da - dl_db) * phi * mu * (1 - mu))
        g_phi = np.sum(dl_da * mu + dl_db * (1 - mu))
        return ll, np.r_[g_beta, g_phi]

    def latent_log_likelihood(self, theta, y) -> tuple[float, FloatArray]:
        """Beta-regression log-likelihood of unrounded responses in (0, 1)."""
        theta = self.check_theta(theta)
        y = np.asarray(y, dtype=float)
        a, b = self.shape_params(theta)
        phi = theta[self.p]
        mu = a / phi
        ll = float(np.sum(-np.asarray(log_beta(a, b)) + (a - 1) * np.log(y) + (b - 1) * np.log1p(-y)))
        ystar = np.log(y) - np.log1p(-y)
        mustar = np.asarray(digamma(a)) - np.asarray(digamma(b))
        g_beta = self.design.T @ (phi * (ystar - mustar) * mu * (1 - mu))
        g_phi = np.sum(mu * (ystar - mustar) + np.log1p(-y) - np.asarray(digamma(b))
                       + np.asarray(digamma(phi)))
        return ll, np.r_[g_beta, g_phi]


# ---------------------------------------------------------------------------
# Pareto regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pareto(Model):
    """Two-parameter Pareto: scale gamma, tail index exp(x'beta)."""

    design: FloatArray = field(repr=False)
    box: Box = None  # type: ignore[assignment]

    response_kind: ClassVar[str] = "positive"
    name: ClassVar[str] = "pareto"

    def __post_init__(self) -> None:
        X = _check_design(self.design)
        object.__setattr__(self, "design", X)
        if self.box is None:
            box = Box(np.r_[np.full(X.shape[1], -BETA_BOUND), 1e-8],
                      np.r_[np.full(X.shape[1], BETA_BOUND), 1e8])
            object.__setattr__(self, "box", box)

    @property
    def n(self) -> int:  # type: ignore[override]
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def tail_index(self, theta):
        return np.exp(self.design @ np.asarray(theta, dtype=float)[: self.p])

    def mean_response(self, theta, row_index: int = 0) -> float:
        theta = self.check_theta(theta)
        alpha = float(np.exp(self.design[row_index] @ theta[: self.p]))
        if alpha <= 1.0:
            raise HeavyTail(f"tail index {alpha:.4g} <= 1: the mean is infinite")
        return theta[self.p] * alpha / (alpha - 1.0)

    def simulate_block(self, theta, stream, size, scale: float | None = None):
        theta = self.check_theta(theta)
        alpha = self.tail_index(theta)
        gamma = theta[self.p] if scale is None else scale
        u = uniform_block(stream, (size, self.n))
        # inverse CDF on 1 - u in (0, 1]
        return gamma * (1.0 - u) ** (-1.0 / alpha)

    def log_likelihood(self, theta, data):
        """Log-likelihood and its gradient in (beta, gamma).

        The gamma derivative is the one-sided derivative valid for
        gamma <= min(y); outside the support the likelihood is -inf.
        """
        self._check_data(data)
        theta = self.check_theta(theta)
        y = data.responses
        gamma = theta[self.p]
        if np.any(y < gamma):
            raise NonFiniteLikelihood("gamma exceeds the smallest response")
        eta = self.design @ theta[: self.p]
        alpha = np.exp(eta)
        logratio = np.log(y / gamma)
        ll = float(np.sum(eta - alpha * logratio - np.log(y)))
        g_beta = self.design.T @ (1.0 - alpha * logratio)
        g_gamma = float(np.sum(alpha) / gamma)
        return ll, np.r_[g_beta, g_gamma]


# ---------------------------------------------------------------------------
# Toy models
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianMeanToy(Model):
    n: int  # type: ignore[misc]
    sigma: float = 1.0
    box: Box = field(default_factory=lambda: Box.uniform(1, -1e8, 1e8))

    response_kind: ClassVar[str] = "real"
    name: ClassVar[str] = "gaussian_mean_toy"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ModelError("toy model needs n >= 1")
        if not self.sigma > 0:
            raise ModelError("sigma must be positive")

    def mean_response(self, theta, row_index: int = 0) -> float:
        return float(self.check_theta(theta)[0])

    def simulate_block(self, theta, stream, size):
        theta = self.check_theta(theta)
        return theta[0] + self.sigma * normal_block(stream, (size, self.n))

    def log_likelihood(self, theta, data):
        self._check_data(data)
        theta = self.check_theta(theta)
        r = data.responses - theta[0]
        s2 = self.sigma ** 2
        ll = float(-0.5 * np.sum(r * r) / s2 - data.n * np.log(self.sigma * np.sqrt(2 * np.pi)))
        return ll, np.array([np.sum(r) / s2])


@dataclass(frozen=True, eq=False)
class UniformScaleToy(Model):
    n: int  # type: ignore[misc]
    box: Box = field(default_factory=lambda: Box.uniform(1, 0.0, 1e8))

    response_kind: ClassVar[str] = "positive"
    name: ClassVar[str] = "uniform_scale_toy"

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ModelError("toy model needs n >= 1")

    def mean_response(self, theta, row_index: int = 0) -> float:
        return float(self.check_theta(theta)[0]) / 2.0

    def simulate_block(self, theta, stream, size):
        theta = self.check_theta(theta)
        return theta[0] * uniform_block(stream, (size, self.n))


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------


def mean_response(model: Model, theta, row_index: int = 0) -> float:
    return model.mean_response(theta, row_index)


def simulate(model: Model, theta, stream: RngStream) -> Dataset:
    return model.simulate(theta, stream)


def log_likelihood(model: Model, theta, data: Dataset) -> tuple[float, FloatArray]:
    return model.log_likelihood(theta, data)


def with_design(model: Model, design: FloatArray) -> Model:
    """Same family and settings on a new covariate matrix."""
    if isinstance(model, MisclassifiedLogistic):
        return MisclassifiedLogistic(design, fpr=model.fpr, fnr=model.fnr)
    if isinstance(model, (Logistic, BetaRounded, Pareto)):
        return type(model)(design)
    raise ModelError(f"{model.name} has no covariates")


# ---------------------------------------------------------------------------
# CSV datasets
# ---------------------------------------------------------------------------


def read_dataset_csv(path: str | Path, require_design: bool = True) -> tuple[FloatArray, FloatArray]:
    """Read ``y`` plus covariate columns; returns (y, design).

    Covariate columns keep their file order. Errors name the offending line.
    With ``require_design=False`` a file holding only ``y`` gives an (n, 0) design.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if "y" not in header:
            raise DatasetError(f"{path}: header has no 'y' column")
        if len(header) < 2 and require_design:
            raise DatasetError(f"{path}: no covariate columns")
        yi = header.index("y")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{path}: non-finite values")
    y = arr[:, yi]
    X = np.delete(arr, yi, axis=1)
    return y, X


def write_dataset_csv(path: str | Path, y, design) -> None:
    y = np.asarray(y, dtype=float)
    X = np.asarray(design, dtype=float)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y"] + [f"x{j}" for j in range(X.shape[1])])
        for yi, xi in zip(y, X):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in xi])
