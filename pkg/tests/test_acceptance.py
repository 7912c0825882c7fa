"""Acceptance criteria 1-9, run on the shipped configs.

Each test records one ``CRITERION k: PASS|FAIL ...`` line before asserting, so the
verdicts show up together in the terminal summary even when a criterion fails.
"""
import math
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from pyjini import harness as H
from pyjini import models as M
from pyjini.config import load_experiments
from pyjini.numerics import (RngStream, digamma, log_gamma, reg_inc_beta, reg_inc_beta_grad,
                             trigamma)

from test_models import fd_gradient, rel_err
from test_numerics import DIGAMMA, INC_BETA, INC_BETA_PARTIALS, LOG_GAMMA, TRIGAMMA

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SUITES = {
    1: ("suite1_uniform_jini",),
    2: ("suite2_uniform_bbc",),
    3: ("suite3_misclassified",),
    4: ("suite4_rounded_beta",),
    5: ("suite5_logistic_bbc",),
    6: ("suite6_pareto_clean", "suite6_pareto_contaminated"),
}
# replication indices re-run for the reproducibility check of the expensive suites
SUBSET = (0, 1, 2, 3, 97, 150, 298, 299)


def config(stem, **changes):
    (cfg,) = load_experiments(CONFIGS / f"{stem}.ini")
    return H.with_overrides(cfg, workers=1, **changes)


@lru_cache(maxsize=None)
def run(stem):
    """Full serial run of one config: (cfg, results, report, seconds)."""
    cfg = config(stem)
    t0 = time.perf_counter()
    results = H.run_replications(cfg)
    seconds = time.perf_counter() - t0
    return cfg, results, H.aggregate(cfg, results), seconds


def verdict(log, k, ok, details):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {details}"
    log.append(line)
    print(line)
    return ok


def mc_se(row, R):
    return row.std_err / math.sqrt(R - row.failures)


def mean_abs_bias(report, method, coords):
    return float(np.mean([report.row(method, c).abs_bias for c in coords]))


def beta_coords(cfg):
    return [f"beta{j}" for j in range(cfg.p)]


class TestCriterion1:
    def test_uniform_jini_unbiased(self, acceptance_log):
        cfg, _, rep, secs = run("suite1_uniform_jini")
        jini, mle = rep.row("JINI", "theta"), rep.row("MLE", "theta")
        se_j, se_m = mc_se(jini, cfg.R), mc_se(mle, cfg.R)
        bias_m = mle.mean_est - 1.0
        ok = (abs(jini.mean_est - 1.0) <= 3 * se_j and abs(bias_m + 1 / 21) <= 3 * se_m
              and secs < 60)
        verdict(acceptance_log, 1, ok,
                f"JINI bias {jini.mean_est - 1:+.5f} (3 SE {3 * se_j:.5f}); "
                f"MLE bias {bias_m:+.5f} vs -1/21 = {-1 / 21:+.5f} (3 SE {3 * se_m:.5f}); {secs:.1f} s")
        assert ok


class TestCriterion2:
    def test_uniform_bbc_bias(self, acceptance_log):
        cfg, _, rep, secs = run("suite2_uniform_bbc")
        bbc = rep.row("BBC", "theta")
        se = mc_se(bbc, cfg.R)
        bias = bbc.mean_est - 1.0
        ok = abs(bias + 1 / 441) <= 3 * se and secs < 60
        verdict(acceptance_log, 2, ok,
                f"BBC bias {bias:+.6f} vs -1/441 = {-1 / 441:+.6f} (3 SE {3 * se:.6f}); {secs:.1f} s")
        assert ok


class TestCriterion3:
    def test_misclassified_bias_and_coverage(self, acceptance_log):
        cfg, _, rep, secs = run("suite3_misclassified")
        names = beta_coords(cfg)
        nonzero = [c for c, t in zip(names, cfg.theta0) if t != 0]
        ratios = {c: rep.row("JINI", c).abs_bias / rep.row("NMLE", c).abs_bias for c in nonzero}
        cover = {c: rep.row("JINI", c).coverage for c in names}
        ok = (all(r < 0.5 for r in ratios.values())
              and all(0.92 <= v <= 0.99 for v in cover.values()) and secs < 900)
        verdict(acceptance_log, 3, ok,
                "JINI/NMLE bias " + " ".join(f"{c}={r:.3f}" for c, r in ratios.items())
                + "; coverage " + " ".join(f"{c}={v:.3f}" for c, v in cover.items())
                + f"; {secs:.0f} s")
        assert ok

    def test_jini_coverage_not_below_naive(self, acceptance_log):
        cfg, _, rep, _ = run("suite3_misclassified")
        names = beta_coords(cfg)
        jini = np.mean([rep.row("JINI", c).coverage for c in names])
        naive = np.mean([rep.row("NMLE", c).coverage for c in names])
        acceptance_log.append(f"EXTRA suite 3 mean coverage: JINI {jini:.3f}, NMLE {naive:.3f}")
        assert jini >= naive


class TestCriterion4:
    def test_rounded_beta_precision(self, acceptance_log):
        _, _, rep, secs = run("suite4_rounded_beta")
        jini, naive = rep.row("JINI", "phi").abs_bias, rep.row("NMLE", "phi").abs_bias
        ok = jini < naive / 3 and secs < 1200
        verdict(acceptance_log, 4, ok,
                f"phi abs bias JINI {jini:.4f}, NMLE {naive:.4f} (limit {naive / 3:.4f}); {secs:.0f} s")
        assert ok


class TestCriterion5:
    def test_jini_not_worse_than_bbc(self, acceptance_log):
        cfg, _, rep, secs = run("suite5_logistic_bbc")
        names = beta_coords(cfg)
        jini, bbc = mean_abs_bias(rep, "JINI", names), mean_abs_bias(rep, "BBC", names)
        ok = jini <= bbc and secs < 900
        verdict(acceptance_log, 5, ok,
                f"mean abs bias JINI {jini:.5f}, BBC {bbc:.5f}; {secs:.0f} s")
        assert ok


class TestCriterion6:
    def test_robust_jini_under_contamination(self, acceptance_log):
        cfg, _, clean, t_clean = run("suite6_pareto_clean")
        _, _, dirty, t_dirty = run("suite6_pareto_contaminated")
        names = beta_coords(cfg)
        jini_dirty = mean_abs_bias(dirty, "JINI", names)
        mle_dirty = mean_abs_bias(dirty, "MLE", names)
        jini_clean = mean_abs_bias(clean, "JINI", names)
        secs = t_clean + t_dirty
        ok = jini_dirty <= 0.3 * mle_dirty and jini_dirty <= 2 * jini_clean and secs < 1200
        verdict(acceptance_log, 6, ok,
                f"mean beta abs bias: JINI contaminated {jini_dirty:.4f}, MLE contaminated "
                f"{mle_dirty:.4f} (limit {0.3 * mle_dirty:.4f}), JINI clean {jini_clean:.4f} "
                f"(limit {2 * jini_clean:.4f}); {secs:.0f} s")
        assert ok


class TestCriterion7:
    def test_fixed_points_reproduce(self, acceptance_log):
        worst, checks, details = -math.inf, 0, []
        for k in (3, 4, 5, 6):
            for stem in SUITES[k]:
                _, results, rep, _ = run(stem)
                d = rep.metadata["diagnostics"]["JINI"]
                n = d.get("fixed_point_checks", 0)
                checks += n
                if n:
                    worst = max(worst, d["fixed_point_max_excess"])
                details.append(f"{stem} {n}")
        ok = checks > 0 and worst <= 1e-12
        verdict(acceptance_log, 7, ok,
                f"max residual minus tol {worst:.3e}; replications checked ("
                + ", ".join(details) + ")")
        assert ok


def _gradient_worst(family):
    rng = np.random.default_rng(100 + len(family))
    X = np.c_[np.ones(80), 0.7 * rng.standard_normal((80, 2))]
    worst = 0.0
    for k in range(10):
        if family == "beta":
            m = M.BetaRounded(X)
            theta = np.r_[rng.normal(0, 0.6, 3), rng.uniform(2, 30)]
        elif family == "pareto":
            m = M.Pareto(X)
            theta = np.r_[rng.normal(0.8, 0.3), rng.normal(0, 0.3, 2), rng.uniform(0.5, 3)]
        elif family == "misclassified":
            m = M.MisclassifiedLogistic(X, fpr=0.0, fnr=0.05)
            theta = rng.normal(0, 1, 3)
        else:
            m, theta = M.Logistic(X), rng.normal(0, 1, 3)
        data = m.simulate(theta, RngStream(k, ("accept-grad", family)))
        if family == "pareto":
            theta[-1] = 0.9 * data.responses.min()
        _, g = m.log_likelihood(theta, data)
        fd = fd_gradient(lambda t: m.log_likelihood(t, data)[0], theta)
        worst = max(worst, rel_err(g, fd))
    return worst


class TestCriterion8:
    def test_special_functions_and_gradients(self, acceptance_log):
        errs = {
            "log_gamma": max(abs(log_gamma(x) - v) / max(abs(v), 1.0) for x, v in LOG_GAMMA.items()),
            "digamma": max(abs(digamma(x) - v) / max(abs(v), 1.0) for x, v in DIGAMMA.items()),
            "trigamma": max(abs(trigamma(x) - v) / abs(v) for x, v in TRIGAMMA.items()),
            "inc_beta": max(abs(reg_inc_beta(*a) - v) for a, v in INC_BETA),
        }
        partial = 0.0
        for args, da, db in INC_BETA_PARTIALS:
            _, ga, gb = reg_inc_beta_grad(*args)
            partial = max(partial, abs(ga - da) / abs(da), abs(gb - db) / abs(db))
        errs["inc_beta_partials"] = partial
        limits = {"log_gamma": 1e-12, "digamma": 1e-10, "trigamma": 1e-10, "inc_beta": 1e-10,
                  "inc_beta_partials": 1e-8}
        grads = {f: _gradient_worst(f) for f in ("logistic", "misclassified", "beta", "pareto")}
        ok = all(errs[k] <= limits[k] for k in limits) and all(g <= 1e-6 for g in grads.values())
        verdict(acceptance_log, 8, ok,
                " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + "; gradient rel err "
                + " ".join(f"{k}={v:.1e}" for k, v in grads.items()))
        assert ok


def _same(a, b):
    """Bit-level equality of two replication results."""
    if a.r != b.r or len(a.outcomes) != len(b.outcomes):
        return False
    for x, y in zip(a.outcomes, b.outcomes):
        if x.error != y.error or x.fixed_point_excess != y.fixed_point_excess:
            return False
        if (x.estimate is None) != (y.estimate is None):
            return False
        if x.estimate is not None and x.estimate.tobytes() != y.estimate.tobytes():
            return False
        if (x.ci is None) != (y.ci is None):
            return False
        if x.ci is not None and (x.ci.lower.tobytes() != y.ci.lower.tobytes()
                                 or x.ci.upper.tobytes() != y.ci.upper.tobytes()):
            return False
    return True


def _report_bytes(report, path):
    return H.write_report(report, path).read_bytes()


class TestCriterion9:
    def test_reproducible_across_runs_and_workers(self, acceptance_log, tmp_path):
        bad = []
        # the cheap suites are re-run in full: once more serially and once with 8 workers
        for k in (1, 2):
            (stem,) = SUITES[k]
            cfg, _, rep, _ = run(stem)
            ref = _report_bytes(rep, tmp_path / f"{stem}_a.csv")
            again = H.aggregate(cfg, H.run_replications(cfg))
            wide_cfg = H.with_overrides(cfg, workers=8)
            wide = H.aggregate(wide_cfg, H.run_replications(wide_cfg))
            if _report_bytes(again, tmp_path / f"{stem}_b.csv") != ref:
                bad.append(f"{stem} rerun")
            if _report_bytes(wide, tmp_path / f"{stem}_c.csv") != ref:
                bad.append(f"{stem} 8 workers")
        # the expensive suites re-run a fixed subset of replications both ways
        compared = 0
        for k in (3, 4, 5, 6):
            for stem in SUITES[k]:
                cfg, results, _, _ = run(stem)
                idx = [r for r in SUBSET if r < cfg.R]
                serial = H.run_replications(cfg, idx)
                wide = H.run_replications(H.with_overrides(cfg, workers=8), idx)
                for r, a, b in zip(idx, serial, wide):
                    compared += 1
                    if not _same(results[r], a):
                        bad.append(f"{stem} r={r} rerun")
                    if not _same(results[r], b):
                        bad.append(f"{stem} r={r} 8 workers")
                sub_a = _report_bytes(H.aggregate(cfg, serial), tmp_path / f"{stem}_s.csv")
                sub_b = _report_bytes(H.aggregate(cfg, wide), tmp_path / f"{stem}_w.csv")
                if sub_a != sub_b:
                    bad.append(f"{stem} subset report")
        ok = not bad
        verdict(acceptance_log, 9, ok,
                f"suites 1-2 full reports identical; {compared} replications of suites 3-6 "
                f"identical serial vs rerun vs 8 workers" if ok else "mismatches: " + ", ".join(bad))
        assert ok
