"""Command-line entry point: ``jini fit|simulate|experiment|report``.

Exit status is 0 on success, 2 for a bad config or input file and 3 when a
computation fails. Progress goes to standard error; standard output carries
only a JSON summary.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import models as M
from .config import (DESIGN_KEYS, EXPERIMENT_KEYS, apply_overrides, load_experiments,
                     model_settings, parse_methods, read_ini, read_section)
from .harness import (ConfigError, DesignConfig, RankDeficient, fit_dataset, generate_design,
                      make_model, read_report, run_experiment, write_report)
from .estimators import IncompatibleSpec
from .inference import REFIT_ERRORS
from .numerics import DomainError, RngStream

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3

# ModelError here means an invalid parameter or model setting in the input
INPUT_ERRORS = (ConfigError, M.DatasetError, M.ModelError, IncompatibleSpec, RankDeficient, OSError)
RUNTIME_ERRORS = REFIT_ERRORS + (DomainError, RuntimeError)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=float))


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_experiment(config_path, overrides=(), output_path=None, raw_path=None,
                   workers: int | None = None) -> int:
    configs = load_experiments(config_path, overrides)
    if workers is not None:
        configs = [dataclasses.replace(c, workers=workers) for c in configs]
    out = Path(output_path) if output_path else Path(f"{configs[0].name}.csv")
    written = []
    for cfg in configs:
        path = out if len(configs) == 1 else out.with_name(f"{out.stem}_fnr{cfg.fnr:g}{out.suffix}")
        raw = None
        if raw_path is not None:
            raw = Path(raw_path) if len(configs) == 1 else \
                Path(raw_path).with_name(f"{Path(raw_path).stem}_fnr{cfg.fnr:g}{Path(raw_path).suffix}")
        _progress(f"running {cfg.name}: R={cfg.R}, {len(cfg.methods)} methods, "
                  f"{cfg.workers} worker(s)")
        report = run_experiment(cfg, progress=True, raw_path=raw)
        write_report(report, path)
        _progress(f"wrote {path} in {report.metadata['wall_time_s']:.1f}s")
        written.append({"name": cfg.name, "report": str(path), "R": cfg.R,
                        "failures": {m.name: report.metadata["diagnostics"][m.name]["failures"]
                                     for m in cfg.methods}})
    _emit({"experiments": written})
    return EXIT_OK


def _model_from_config(cp, design, n):
    ms = model_settings(cp, need_theta=False)
    if len(ms["fnr"]) != 1:
        raise ConfigError("[model] fnr must be a single value here")
    model = make_model(ms["model"], design, n, ms["fpr"], ms["fnr"][0], ms["sigma"])
    return model, ms


def cmd_simulate(config_path, output_path, overrides=(), replication: int = 0) -> int:
    cp = read_ini(config_path)
    apply_overrides(cp, overrides)
    ex = read_section(cp, "experiment", EXPERIMENT_KEYS, required=("n",))
    ms = model_settings(cp)
    n = ex["n"]
    seed = ex.get("seed", 0)
    if ms["model"].endswith("_toy"):
        design = None
    else:
        if "p" not in ex:
            raise ConfigError("[experiment] missing required key 'p'")
        d = DesignConfig(**read_section(cp, "design", DESIGN_KEYS))
        if d.kind == "csv":
            _, design = M.read_dataset_csv(d.path)
        else:
            design = generate_design(d.kind, n, ex["p"], RngStream(seed, ("design",)), d.scale, d.rho)
    model, _ = _model_from_config(cp, design, n)
    theta = model.check_theta(ms["theta0"])
    stream = RngStream(seed, ("replication", replication)).child("data")
    y = model.simulate_block(theta, stream, 1)[0]
    X = design if design is not None else np.empty((n, 0))
    M.write_dataset_csv(output_path, y, X)
    _progress(f"wrote {n} rows to {output_path}")
    _emit({"output": str(output_path), "n": n, "p": X.shape[1], "model": model.name})
    return EXIT_OK


def cmd_fit(config_path, data_csv, output_path, overrides=()) -> int:
    cp = read_ini(config_path)
    apply_overrides(cp, overrides)
    ex = read_section(cp, "experiment", EXPERIMENT_KEYS)
    family = model_settings(cp, need_theta=False)["model"]
    y, X = M.read_dataset_csv(data_csv, require_design=not family.endswith("_toy"))
    design = X if X.shape[1] else None
    model, _ = _model_from_config(cp, design, len(y))
    methods = parse_methods(cp)
    level = ex.get("level", 0.95)
    _progress(f"fitting {len(methods)} method(s) to {len(y)} observations")
    outcomes = fit_dataset(methods, model, y, level, ex.get("b", 100), ex.get("seed", 0))
    names = model_coordinates(model)
    rows = []
    for oc in outcomes:
        for j, coord in enumerate(names):
            if oc.ci is not None:
                se, lo, hi = oc.ci.se[j], oc.ci.lower[j], oc.ci.upper[j]
                sig = int(not (lo <= 0.0 <= hi))
            else:
                se = lo = hi = math.nan
                sig = ""
            rows.append([oc.method, coord, oc.estimate[j], se, lo, hi, sig])
    with open(output_path, "w") as fh:
        fh.write("method,coord,estimate,se,lower,upper,excludes_zero\n")
        for r in rows:
            fh.write(",".join(str(v) if isinstance(v, (str, int)) else repr(float(v)) for v in r) + "\n")
    _progress(f"wrote {output_path}")
    _emit({"output": str(output_path), "n": len(y), "level": level,
           "estimates": {oc.method: [float(v) for v in oc.estimate] for oc in outcomes}})
    return EXIT_OK


def model_coordinates(model: M.Model) -> list[str]:
    if isinstance(model, (M.GaussianMeanToy, M.UniformScaleToy)):
        return ["theta"]
    names = [f"beta{j}" for j in range(model.design.shape[1])]
    if isinstance(model, M.BetaRounded):
        names.append("phi")
    elif isinstance(model, M.Pareto):
        names.append("gamma")
    return names


def cmd_report(report_path) -> int:
    if not Path(report_path).exists():
        raise ConfigError(f"no report at {report_path}")
    try:
        rep = read_report(report_path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{report_path}: {exc}") from None
    rows = [{"method": r.method, "coord": r.coord, "true_value": r.true_value,
             "mean_est": r.mean_est, "abs_bias": r.abs_bias, "std_err": r.std_err,
             "coverage": None if math.isnan(r.coverage) else r.coverage,
             "avg_ci_len": None if math.isnan(r.avg_ci_len) else r.avg_ci_len,
             "failures": r.failures} for r in rep.rows]
    _emit({"report": str(report_path), "rows": rows,
           "diagnostics": rep.metadata.get("diagnostics", {})})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jini", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def overrides(p):
        p.add_argument("--override", "--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config value (repeatable)")

    p = sub.add_parser("experiment", help="run a Monte Carlo experiment")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="report CSV (default <name>.csv)")
    p.add_argument("--raw", help="also write per-replication estimates here")
    p.add_argument("--workers", type=int, help="worker processes (default $JINI_WORKERS or 1)")
    overrides(p)

    p = sub.add_parser("simulate", help="simulate one dataset")
    p.add_argument("config")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--replication", type=int, default=0)
    overrides(p)

    p = sub.add_parser("fit", help="fit the configured methods to a dataset CSV")
    p.add_argument("config")
    p.add_argument("data")
    p.add_argument("-o", "--output", required=True)
    overrides(p)

    p = sub.add_parser("report", help="print a report as JSON")
    p.add_argument("report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "experiment":
            if args.workers is not None and args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            return cmd_experiment(args.config, args.overrides, args.output, args.raw, args.workers)
        if args.verb == "simulate":
            return cmd_simulate(args.config, args.output, args.overrides, args.replication)
        if args.verb == "fit":
            return cmd_fit(args.config, args.data, args.output, args.overrides)
        return cmd_report(args.report)
    except INPUT_ERRORS as exc:
        print(f"jini: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RUNTIME_ERRORS as exc:
        print(f"jini: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # remaining ValueErrors come from validating user-supplied values
        print(f"jini: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
