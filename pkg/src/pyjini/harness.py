"""Monte Carlo experiments: designs, replications, aggregation and reports.

Every random quantity in a replication is drawn from a stream keyed by
(base_seed, replication, role), so results do not depend on how replications
are distributed over worker processes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import estimators as E
from . import models as M
from .inference import (REFIT_ERRORS, CiResult, bootstrap_se,
                        plugin_cov_logistic_mle, wald_ci)
from .jini import (JiniConfig, analytic_moment, bbc_estimate, ib_solve,
                   simulated_moment)
from .numerics import FloatArray, RngStream

log = logging.getLogger(__name__)

REPORT_HEADER = ["method", "coord", "true_value", "mean_est", "abs_bias", "std_err",
                 "coverage", "avg_ci_len", "failures"]
WORKERS_ENV = "JINI_WORKERS"

MODEL_FAMILIES = ("logistic", "misclassified_logistic", "beta_rounded", "pareto",
                  "gaussian_toy", "uniform_toy")
DESIGN_KINDS = ("iid", "toeplitz", "csv", "none")
METHOD_KINDS = ("fit", "jini", "bbc")
CI_RULES = ("none", "plugin", "bootstrap")


class ConfigError(ValueError):
    pass


class RankDeficient(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignConfig:
    kind: str = "iid"
    scale: float = 1.0  # entries have standard deviation scale * n^(-1/2)
    rho: float = 0.8
    path: str | None = None
    redesign: bool = False

    def __post_init__(self) -> None:
        if self.kind not in DESIGN_KINDS:
            raise ConfigError(f"design kind must be one of {DESIGN_KINDS}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("csv design needs a path")


@dataclass(frozen=True)
class MethodConfig:
    name: str
    kind: str
    estimator: str
    c: float | None = None
    H: int = 200
    tol: float = 1e-6
    max_iter: int = 200
    damping: float = 1.0
    seed_policy: str = "common"
    moment: str = "simulated"
    ci: str = "none"
    boot_H: int | None = None  # defaults to H
    boot_tol: float | None = None  # defaults to tol
    boot_max_iter: int | None = None  # defaults to max_iter

    def __post_init__(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"method {self.name}: kind must be one of {METHOD_KINDS}")
        if self.ci not in CI_RULES:
            raise ConfigError(f"method {self.name}: ci must be one of {CI_RULES}")
        if self.moment not in ("simulated", "analytic"):
            raise ConfigError(f"method {self.name}: moment must be simulated or analytic")
        if self.estimator not in E.VARIANTS:
            raise ConfigError(f"method {self.name}: unknown estimator {self.estimator!r}")
        if "," in self.name:
            raise ConfigError("method names may not contain commas")

    def jini_config(self, bootstrap: bool = False) -> JiniConfig:
        H = self.boot_H if bootstrap and self.boot_H else self.H
        tol = self.boot_tol if bootstrap and self.boot_tol else self.tol
        max_iter = self.boot_max_iter if bootstrap and self.boot_max_iter else self.max_iter
        return JiniConfig(H=H, max_iter=max_iter, tol=tol, damping=self.damping,
                          seed_policy=self.seed_policy)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: str
    theta0: tuple[float, ...]
    n: int
    p: int
    methods: tuple[MethodConfig, ...]
    R: int
    design: DesignConfig = DesignConfig()
    level: float = 0.95
    B: int = 100
    fpr: float = 0.0
    fnr: float = 0.0
    sigma: float = 1.0
    contamination: float = 0.0
    contamination_scale: float | None = None
    base_seed: int = 0
    workers: int = 1
    check_fixed_point: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta0", tuple(float(v) for v in self.theta0))
        if self.model not in MODEL_FAMILIES:
            raise ConfigError(f"model must be one of {MODEL_FAMILIES}")
        if self.R < 1:
            raise ConfigError("R must be at least 1")
        toy = self.model.endswith("_toy")
        if not toy and self.n <= self.p:
            raise ConfigError("n must exceed p")
        if not 0 <= self.contamination <= 0.5:
            raise ConfigError("contamination fraction must lie in [0, 0.5]")
        if self.contamination > 0:
            if self.model != "pareto":
                raise ConfigError("contamination is implemented for the Pareto model only")
            if not self.contamination_scale or self.contamination_scale <= 0:
                raise ConfigError("contamination needs a positive scale")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if not self.methods:
            raise ConfigError("at least one method is required")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("method names must be unique")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        extra = {"beta_rounded": 1, "pareto": 1}.get(self.model, 0)
        expected = 1 if toy else self.p + extra
        if len(self.theta0) != expected:
            raise ConfigError(f"theta0 needs {expected} values for {self.model} with p={self.p}, "
                              f"got {len(self.theta0)}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Designs and models
# ---------------------------------------------------------------------------


def toeplitz_cholesky(p: int, rho: float) -> FloatArray:
    idx = np.arange(p)
    T = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(T)


def generate_design(kind: str, n: int, p: int, stream: RngStream, scale: float = 1.0,
                    rho: float = 0.8) -> FloatArray:
    """Intercept column of ones plus p - 1 random covariate columns.

    ``iid``: entries N(0, sd = scale n^(-1/2)). ``toeplitz``: the same entries
    multiplied on the right by the lower Cholesky factor of the Toeplitz
    matrix with first row (1, rho, rho^2, ...). A rank-deficient draw is
    regenerated once from a child stream.
    """
    if n <= p:
        raise ConfigError("design needs n > p")
    if kind not in ("iid", "toeplitz"):
        raise ConfigError(f"cannot generate a {kind!r} design")
    for attempt in range(2):
        s = stream if attempt == 0 else stream.child("retry")
        Z = s.normal((n, p - 1)) * (scale / math.sqrt(n))
        if kind == "toeplitz" and p > 1:
            Z = Z @ toeplitz_cholesky(p - 1, rho)
        X = np.c_[np.ones(n), Z]
        if np.linalg.matrix_rank(X) == p:
            return X
    raise RankDeficient("design is rank deficient after one regeneration")


def make_model(family: str, design: FloatArray | None, n: int | None = None, fpr: float = 0.0,
               fnr: float = 0.0, sigma: float = 1.0) -> M.Model:
    """Model object for a family name; zero misclassification rates give Logistic."""
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"model must be one of {MODEL_FAMILIES}")
    if family.endswith("_toy"):
        if n is None:
            raise ConfigError(f"{family} needs n")
        return M.GaussianMeanToy(n, sigma=sigma) if family == "gaussian_toy" else M.UniformScaleToy(n)
    if design is None:
        raise ConfigError(f"{family} needs a design")
    if family == "misclassified_logistic" and (fpr or fnr):
        return M.MisclassifiedLogistic(design, fpr=fpr, fnr=fnr)
    if family in ("logistic", "misclassified_logistic"):
        return M.Logistic(design)
    if family == "beta_rounded":
        return M.BetaRounded(design)
    return M.Pareto(design)


def build_model(cfg: ExperimentConfig, design: FloatArray | None) -> M.Model:
    return make_model(cfg.model, design, cfg.n, cfg.fpr, cfg.fnr, cfg.sigma)


def experiment_design(cfg: ExperimentConfig, r: int | None = None) -> FloatArray | None:
    if cfg.model.endswith("_toy"):
        return None
    d = cfg.design
    if d.kind == "csv":
        _, X = M.read_dataset_csv(d.path)
        if X.shape != (cfg.n, cfg.p):
            raise ConfigError(f"design file has shape {X.shape}, config says ({cfg.n}, {cfg.p})")
        return X
    if d.kind == "none":
        raise ConfigError(f"{cfg.model} needs a design")
    path = ("design",) if r is None else ("design", r)
    return generate_design(d.kind, cfg.n, cfg.p, RngStream(cfg.base_seed, path), d.scale, d.rho)


def estimator_spec(method: MethodConfig, model: M.Model) -> E.EstimatorSpec:
    if method.estimator == E.NWMLE:
        target = "pareto" if isinstance(model, M.Pareto) else "logistic"
        return E.EstimatorSpec(E.NWMLE, c=method.c, target=target)
    return E.EstimatorSpec(method.estimator)


# ---------------------------------------------------------------------------
# One replication
# ---------------------------------------------------------------------------


@dataclass
class MethodOutcome:
    method: str
    estimate: FloatArray | None
    ci: CiResult | None = None
    error: str = ""
    ib_iterations: int = 0
    ib_converged: bool | None = None
    fixed_point_excess: float | None = None  # max over checked solves of resid - tol

    @property
    def ok(self) -> bool:
        return self.estimate is not None


@dataclass
class ReplicationResult:
    r: int
    outcomes: list[MethodOutcome] = field(default_factory=list)


def replication_streams(cfg: ExperimentConfig, r: int) -> dict[str, RngStream]:
    root = RngStream(cfg.base_seed, ("replication", r))
    return {"data": root.child("data"), "contamination": root.child("contamination"),
            "sim": root.child("sim"), "boot": root.child("bootstrap")}


def simulate_observed(cfg: ExperimentConfig, model: M.Model, r: int) -> FloatArray:
    """Observed responses of replication r, with optional Pareto contamination."""
    st = replication_streams(cfg, r)
    theta0 = np.array(cfg.theta0)
    y = model.simulate_block(theta0, st["data"], 1)[0].copy()
    if cfg.contamination > 0:
        k = int(round(cfg.contamination * model.n))
        rows = st["contamination"].child("rows").generator().permutation(model.n)[:k]
        alt = model.simulate_block(theta0, st["contamination"].child("responses"), 1,
                                   scale=cfg.contamination_scale)[0]
        y[rows] = alt[rows]
    return y


class _FixedPointLog:
    """Collects the worst re-evaluated moment residual over checked solves."""

    def __init__(self) -> None:
        self.excess: float | None = None

    def add(self, value: float) -> None:
        self.excess = value if self.excess is None else max(self.excess, value)


def _check_fixed_point(model, spec, res, pi_obs, jcfg: JiniConfig, stream, fp: _FixedPointLog,
                       analytic: bool) -> None:
    if not res.converged:
        return
    if analytic:
        again = analytic_moment(model, res.estimate)
    else:
        again = simulated_moment(model, spec, res.estimate, jcfg.H, stream).value
    fp.add(float(np.max(np.abs(pi_obs - again))) - jcfg.tol)


def _initial_fit(spec: E.EstimatorSpec, model: M.Model, y: FloatArray) -> FloatArray:
    fit = E.fit_batch(spec, model, y[None, :])
    if not fit.converged[0]:
        raise E.status_error(spec.variant, int(fit.status[0]), float(fit.residual[0]), fit.estimate[0])
    return fit.estimate[0]


def _estimate(method: MethodConfig, model: M.Model, spec: E.EstimatorSpec, y: FloatArray,
              stream: RngStream, bootstrap: bool, fp: _FixedPointLog | None,
              warm: tuple[FloatArray, FloatArray] | None = None):
    """Point estimate of ``method`` on responses y; returns (estimate, ib result)."""
    pi_obs = _initial_fit(spec, model, y)
    if method.kind == "fit":
        return pi_obs, None
    analytic = method.moment == "analytic"
    if method.kind == "bbc":
        return bbc_estimate(pi_obs, model, spec, method.H, stream, method.moment), None
    jcfg = method.jini_config(bootstrap)
    start = None
    if warm is not None:
        # one-step guess theta_hat + (pi_b - pi_obs) for bootstrap refits
        theta_hat, pi_ref = warm
        start = model.box.project(theta_hat + (pi_obs - pi_ref))
    res = ib_solve(pi_obs, model, spec, jcfg, method.moment, stream, start=start)
    if fp is not None:
        _check_fixed_point(model, spec, res, pi_obs, jcfg, stream, fp, analytic)
    return res.estimate, res


def run_replication(cfg: ExperimentConfig, r: int, design: FloatArray | None = None) -> ReplicationResult:
    """Simulate replication r and apply every configured method to it."""
    if not 0 <= r < cfg.R:
        raise ValueError(f"replication index {r} outside [0, {cfg.R})")
    if design is None or cfg.design.redesign:
        design = experiment_design(cfg, r if cfg.design.redesign else None)
    model = build_model(cfg, design)
    st = replication_streams(cfg, r)
    y = simulate_observed(cfg, model, r)
    out = ReplicationResult(r)
    for method in cfg.methods:
        spec = estimator_spec(method, model)
        fp = _FixedPointLog() if cfg.check_fixed_point and method.kind == "jini" else None
        oc = MethodOutcome(method.name, None)
        try:
            est, res = _estimate(method, model, spec, y, st["sim"], False, fp)
            oc.estimate = np.asarray(est, dtype=float)
            if res is not None:
                oc.ib_iterations, oc.ib_converged = res.iterations, res.converged
            oc.ci = confidence_interval(method, model, spec, y, oc.estimate, cfg.level, cfg.B,
                                        st["boot"].child(method.name), fp)
        except REFIT_ERRORS as exc:
            oc.error = f"{type(exc).__name__}: {exc}"
            log.debug("replication %d, %s failed: %s", r, method.name, exc)
        if fp is not None:
            oc.fixed_point_excess = fp.excess
        out.outcomes.append(oc)
    return out


def confidence_interval(method: MethodConfig, model: M.Model, spec: E.EstimatorSpec,
                        y: FloatArray, estimate: FloatArray, level: float, B: int,
                        stream: RngStream, fp: _FixedPointLog | None = None) -> CiResult | None:
    """Interval for ``estimate`` by the method's CI rule (None for rule none)."""
    if method.ci == "none":
        return None
    if method.ci == "plugin":
        if not isinstance(model, M.Logistic):
            raise ConfigError(f"plug-in intervals need a logistic model ({method.name})")
        cov = plugin_cov_logistic_mle(model.design, estimate[: model.dim])
        return wald_ci(estimate, np.sqrt(np.diag(cov)), level)
    pi_ref = _initial_fit(spec, model, y) if method.kind == "jini" else None

    def refit(yb, b, s):
        warm = (estimate, pi_ref) if method.kind == "jini" else None
        return _estimate(method, model, spec, yb, s, True, fp, warm)[0]

    boot = bootstrap_se(model, model.box.project(estimate), refit, B, stream)
    return wald_ci(estimate, boot.se, level, boot.B)


def fit_dataset(methods: Sequence[MethodConfig], model: M.Model, y: FloatArray, level: float,
                B: int, base_seed: int) -> list[MethodOutcome]:
    """Apply each method to one observed dataset, with intervals where configured.

    Errors propagate: a failed fit on real data is a failure, not a statistic.
    """
    root = RngStream(base_seed, ("fit",))
    out = []
    for method in methods:
        spec = estimator_spec(method, model)
        est, res = _estimate(method, model, spec, y, root.child("sim"), False, None)
        oc = MethodOutcome(method.name, np.asarray(est, dtype=float))
        if res is not None:
            oc.ib_iterations, oc.ib_converged = res.iterations, res.converged
        oc.ci = confidence_interval(method, model, spec, y, oc.estimate, level, B,
                                    root.child("bootstrap", method.name))
        out.append(oc)
    return out


# ---------------------------------------------------------------------------
# Experiments and aggregation
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    coord: str
    true_value: float
    mean_est: float
    abs_bias: float
    std_err: float
    coverage: float
    avg_ci_len: float
    failures: int


@dataclass
class McReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def row(self, method: str, coord: str) -> ReportRow:
        for r in self.rows:
            if r.method == method and r.coord == coord:
                return r
        raise KeyError((method, coord))

    def method_rows(self, method: str) -> list[ReportRow]:
        return [r for r in self.rows if r.method == method]


def coordinate_names(cfg: ExperimentConfig) -> list[str]:
    if cfg.model.endswith("_toy"):
        return ["theta"]
    names = [f"beta{j}" for j in range(cfg.p)]
    if cfg.model == "beta_rounded":
        names.append("phi")
    elif cfg.model == "pareto":
        names.append("gamma")
    return names


def _run_chunk(args) -> list[ReplicationResult]:
    cfg, rs, design = args
    # single-threaded BLAS keeps floating-point reductions identical everywhere
    with threadpool_limits(limits=1):
        return [run_replication(cfg, r, design) for r in rs]


def run_replications(cfg: ExperimentConfig, indices: Sequence[int] | None = None,
                     progress: bool = False) -> list[ReplicationResult]:
    """Run the given replications (default all) and return them in index order."""
    indices = list(range(cfg.R)) if indices is None else list(indices)
    design = None if cfg.design.redesign else experiment_design(cfg)
    workers = max(1, min(cfg.workers, len(indices)))
    if workers == 1:
        results = []
        for k, r in enumerate(indices):
            results.extend(_run_chunk((cfg, [r], design)))
            if progress and (k + 1) % max(1, len(indices) // 20) == 0:
                print(f"[{cfg.name}] {k + 1}/{len(indices)} replications", file=sys.stderr)
        return results
    # interleaved chunks keep the load balanced; results are re-sorted by index
    chunks = [indices[i::workers * 4] for i in range(workers * 4)]
    chunks = [c for c in chunks if c]
    results = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for k, part in enumerate(pool.map(_run_chunk, [(cfg, c, design) for c in chunks])):
            results.extend(part)
            if progress:
                print(f"[{cfg.name}] chunk {k + 1}/{len(chunks)} done", file=sys.stderr)
    results.sort(key=lambda res: res.r)
    return results


def _fsum_mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else math.nan


def aggregate(cfg: ExperimentConfig, results: list[ReplicationResult]) -> McReport:
    """Per method and coordinate statistics over successful replications."""
    names = coordinate_names(cfg)
    theta0 = cfg.theta0
    rows = []
    for mi, method in enumerate(cfg.methods):
        outs = [res.outcomes[mi] for res in results]
        good = [o for o in outs if o.ok]
        failures = len(outs) - len(good)
        for j, coord in enumerate(names):
            est = [float(o.estimate[j]) for o in good]
            mean = _fsum_mean(est)
            if len(est) > 1:
                sd = math.sqrt(math.fsum((e - mean) ** 2 for e in est) / (len(est) - 1))
            else:
                sd = math.nan
            with_ci = [o for o in good if o.ci is not None]
            if with_ci:
                hits = sum(bool(o.ci.lower[j] <= theta0[j] <= o.ci.upper[j]) for o in with_ci)
                coverage = round(hits / len(with_ci), 6)
                ci_len = _fsum_mean([float(o.ci.upper[j] - o.ci.lower[j]) for o in with_ci])
            else:
                coverage = math.nan
                ci_len = math.nan
            rows.append(ReportRow(method.name, coord, theta0[j], mean, abs(mean - theta0[j]),
                                  sd, coverage, ci_len, failures))
    return McReport(rows, {"config": cfg.to_dict(), "seed": cfg.base_seed,
                           "diagnostics": diagnostics(cfg, results)})


def diagnostics(cfg: ExperimentConfig, results: list[ReplicationResult]) -> dict:
    out = {}
    for mi, method in enumerate(cfg.methods):
        outs = [res.outcomes[mi] for res in results]
        d: dict = {"failures": sum(not o.ok for o in outs)}
        errors = sorted({o.error.split(":")[0] for o in outs if o.error})
        if errors:
            d["error_kinds"] = errors
        if method.kind == "jini":
            solved = [o for o in outs if o.ib_converged is not None]
            d["ib_converged"] = sum(bool(o.ib_converged) for o in solved)
            d["ib_not_converged"] = sum(not o.ib_converged for o in solved)
            d["ib_mean_iterations"] = _fsum_mean([float(o.ib_iterations) for o in solved])
            checked = [o.fixed_point_excess for o in outs if o.fixed_point_excess is not None]
            if checked:
                d["fixed_point_checks"] = len(checked)
                d["fixed_point_max_excess"] = max(checked)
        out[method.name] = d
    return out


def run_experiment(cfg: ExperimentConfig, progress: bool = False,
                   raw_path: str | Path | None = None) -> McReport:
    """Run all replications and aggregate them into a report."""
    t0 = time.perf_counter()
    results = run_replications(cfg, progress=progress)
    report = aggregate(cfg, results)
    report.metadata["wall_time_s"] = time.perf_counter() - t0
    if raw_path is not None:
        write_raw(cfg, results, raw_path)
    return report


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else repr(float(value))


def write_report(report: McReport, path: str | Path) -> Path:
    """CSV report plus ``<path>.meta.json`` with the config and diagnostics."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            cov = "nan" if math.isnan(r.coverage) else f"{r.coverage:.6f}"
            w.writerow([r.method, r.coord, _fmt(r.true_value), _fmt(r.mean_est),
                        _fmt(r.abs_bias), _fmt(r.std_err), cov, _fmt(r.avg_ci_len), r.failures])
    meta = Path(str(path) + ".meta.json")
    meta.write_text(json.dumps(report.metadata, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def read_report(path: str | Path) -> McReport:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header")
        rows = [ReportRow(m, c, float(t), float(me), float(b), float(s), float(cv),
                          float(cl), int(f)) for m, c, t, me, b, s, cv, cl, f in reader]
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return McReport(rows, meta)


def write_raw(cfg: ExperimentConfig, results: list[ReplicationResult], path: str | Path) -> Path:
    """One row per (replication, method) with every coordinate and CI bound."""
    names = coordinate_names(cfg)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replication", "method", "status", "ib_iterations", "ib_converged"]
                   + [f"est_{c}" for c in names] + [f"lower_{c}" for c in names]
                   + [f"upper_{c}" for c in names])
        for res in results:
            for o in res.outcomes:
                est = [_fmt(v) for v in o.estimate] if o.ok else ["nan"] * len(names)
                if o.ci is not None:
                    lo = [_fmt(v) for v in o.ci.lower]
                    hi = [_fmt(v) for v in o.ci.upper]
                else:
                    lo = hi = ["nan"] * len(names)
                status = "ok" if o.ok else o.error.split(":")[0]
                conv = "" if o.ib_converged is None else str(int(o.ib_converged))
                w.writerow([res.r, o.method, status, o.ib_iterations, conv] + est + lo + hi)
    return path


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **changes)
