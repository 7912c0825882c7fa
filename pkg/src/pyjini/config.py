"""INI experiment configuration and command-line overrides.

Layout::

    [experiment]
    name = misclassified
    n = 200
    p = 5
    R = 500
    B = 100
    level = 0.95
    seed = 1
    workers = 1

    [model]
    family = misclassified_logistic
    theta0 = 0.3, -2, -4, 0, 0
    fnr = 0.05

    [design]
    kind = toeplitz
    scale = 4

    [method.JINI]
    kind = jini
    estimator = naive_mle_misclassified
    H = 200
    ci = bootstrap

A list value for ``model.fnr`` expands into one experiment per rate.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path
from typing import Iterable

from .harness import (ConfigError, DesignConfig, ExperimentConfig, MethodConfig,
                      default_workers)

EXPERIMENT_KEYS = {"name": str, "n": int, "p": int, "r": int, "b": int, "level": float,
                    "seed": int, "workers": int, "check_fixed_point": bool}
MODEL_KEYS = {"family": str, "theta0": str, "fpr": float, "fnr": str, "sigma": float,
               "contamination": float, "contamination_scale": float}
DESIGN_KEYS = {"kind": str, "scale": float, "rho": float, "path": str, "redesign": bool}
_METHOD_TYPES = {"kind": str, "estimator": str, "c": float, "h": int, "tol": float,
                 "max_iter": int, "damping": float, "seed_policy": str, "moment": str,
                 "ci": str, "boot_h": int, "boot_tol": float, "boot_max_iter": int}
_METHOD_FIELDS = {f.name.lower(): f.name for f in fields(MethodConfig)}

# bare override keys and the section they address
_BARE = {"seed": "experiment", "r": "experiment", "b": "experiment", "n": "experiment",
         "p": "experiment", "level": "experiment", "workers": "experiment",
         "h": "method", "tol": "method", "fnr": "model", "fpr": "model"}


def _convert(section: str, key: str, raw: str, typ):
    try:
        if typ is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {typ.__name__}") from None


def parse_floats(section: str, key: str, raw: str) -> tuple[float, ...]:
    parts = [s for s in raw.replace(";", ",").split(",") if s.strip()]
    if not parts:
        raise ConfigError(f"[{section}] {key} is empty")
    return tuple(_convert(section, key, s, float) for s in parts)


def read_section(cp: configparser.ConfigParser, name: str, allowed: dict, required=()) -> dict:
    if not cp.has_section(name):
        if required:
            raise ConfigError(f"missing section [{name}]")
        return {}
    sec = cp[name]
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"[{name}] unknown key {key!r}")
    for key in required:
        if key not in sec:
            raise ConfigError(f"[{name}] missing required key {key!r}")
    return {k: _convert(name, k, sec[k], allowed[k]) for k in sec}


def read_ini(path: str | Path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str.lower  # type: ignore[assignment]
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides: Iterable[str]) -> None:
    """Apply ``key=value`` strings in place.

    Keys are either dotted (``model.fnr``, ``method.JINI.H``) or one of the
    bare shortcuts seed, R, B, n, p, level, workers, fnr, fpr, H and tol;
    bare H and tol apply to every simulation-based method.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        parts = key.split(".")
        if len(parts) == 1:
            k = parts[0].lower()
            if k not in _BARE:
                raise ConfigError(f"unknown override key {key!r}")
            if _BARE[k] == "method":
                targets = [s for s in cp.sections() if s.startswith("method.")
                           and cp[s].get("kind", "fit") != "fit"]
                for s in targets:
                    cp[s][k] = value
            else:
                if not cp.has_section(_BARE[k]):
                    cp.add_section(_BARE[k])
                cp[_BARE[k]][k] = value
        else:
            section, k = ".".join(parts[:-1]), parts[-1].lower()
            if not cp.has_section(section):
                raise ConfigError(f"override {key!r}: no section [{section}]")
            cp[section][k] = value


def parse_methods(cp: configparser.ConfigParser) -> tuple[MethodConfig, ...]:
    out = []
    for sec in cp.sections():
        if not sec.startswith("method."):
            continue
        name = sec[len("method."):]
        vals = read_section(cp, sec, _METHOD_TYPES, required=("kind", "estimator"))
        kwargs = {_METHOD_FIELDS[k]: v for k, v in vals.items()}
        out.append(MethodConfig(name=name, **kwargs))
    if not out:
        raise ConfigError("no [method.NAME] sections")
    return tuple(out)


def model_settings(cp: configparser.ConfigParser, need_theta: bool = True) -> dict:
    """Model family, rates and theta0 from the [model] section."""
    m = read_section(cp, "model", MODEL_KEYS, required=("family",))
    out = {"model": m["family"], "fpr": m.get("fpr", 0.0), "sigma": m.get("sigma", 1.0),
           "contamination": m.get("contamination", 0.0),
           "contamination_scale": m.get("contamination_scale")}
    out["fnr"] = parse_floats("model", "fnr", m["fnr"]) if "fnr" in m else (0.0,)
    if "theta0" in m:
        out["theta0"] = parse_floats("model", "theta0", m["theta0"])
    elif need_theta:
        raise ConfigError("[model] missing required key 'theta0'")
    return out


def load_experiments(path: str | Path, overrides: Iterable[str] = ()) -> list[ExperimentConfig]:
    """Experiments described by an INI file; one per listed fnr value."""
    cp = read_ini(path)
    apply_overrides(cp, overrides)
    ex = read_section(cp, "experiment", EXPERIMENT_KEYS, required=("n",))
    model = model_settings(cp)
    design = DesignConfig(**read_section(cp, "design", DESIGN_KEYS))
    if model["model"].endswith("_toy"):
        p = ex.get("p", 1)
    elif "p" in ex:
        p = ex["p"]
    else:
        raise ConfigError("[experiment] missing required key 'p'")
    fnrs = model.pop("fnr")
    base = dict(name=ex.get("name", Path(path).stem), n=ex["n"], p=p,
                methods=parse_methods(cp), R=ex.get("r", 100), design=design,
                level=ex.get("level", 0.95), B=ex.get("b", 100),
                base_seed=ex.get("seed", 0), workers=ex.get("workers", default_workers()),
                check_fixed_point=ex.get("check_fixed_point", False), **model)
    try:
        cfg = ExperimentConfig(fnr=fnrs[0], **base)
        configs = [cfg] + [replace(cfg, fnr=f) for f in fnrs[1:]]
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if len(configs) > 1:
        configs = [replace(c, name=f"{c.name}_fnr{c.fnr:g}") for c in configs]
    return configs
