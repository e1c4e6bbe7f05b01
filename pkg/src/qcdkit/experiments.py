"""Experiment drivers behind the command line: delay comparisons, FDR study, custom runs.

Each driver takes a validated configuration dict and returns a
:class:`ResultTable`. :func:`write_outputs` stores the table as CSV next to a
metadata document and a matplotlib script that plots the CSV.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import jsonschema
import numpy as np
import scipy

from .calibration import (CalibrationCache, MCConfig, calibrate_threshold, estimate_delay)
from .fdr import bayes_common_threshold_ensemble, count_vr, fdr_estimate, fnr_estimate, fdr_ratios
from .model import ChangeScenario, ContractError, SparseRandom
from .registry import KINDS, DetectorSpec

__all__ = [
    "CONFIG_SCHEMA",
    "ConfigError",
    "ResultTable",
    "resolve_config",
    "validate_config",
    "run_fig1a",
    "run_fig1b",
    "run_fig2",
    "run_fdr",
    "run_custom",
    "run_experiment",
    "write_outputs",
    "config_hash",
]

EXPERIMENTS = ("fig1a", "fig1b", "fig2", "fdr", "custom")

_detector_schema = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "kind": {"enum": sorted(KINDS)},
        "params": {"type": "object"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "scale": {"enum": ["desk", "paper"]},
        "seed": {"type": "integer", "minimum": 0},
        "replications": {"type": "integer", "minimum": 2},
        "calibration_replications": {"type": "integer", "minimum": 2},
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "integer", "minimum": 1},
        "cache": {"type": ["string", "null"]},
        "model": {
            "type": "object",
            "properties": {
                "K": {"type": "integer", "minimum": 1},
                "mu": {"type": "number"},
                "theta": {"type": ["number", "array"], "items": {"type": "number"}},
                "kl": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "detectors": {"type": "array", "items": _detector_schema, "minItems": 1},
        "arl": {"type": "number", "exclusiveMinimum": 1},
        "gammas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 1}, "minItems": 1},
        "nu": {"type": "integer", "minimum": 1},
        "nu_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "L_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "theta_rule": {"enum": ["fixed", "sparse"]},
        "fdr": {
            "type": "object",
            "properties": {
                "rho": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "alphas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                      "maximum": 1}, "minItems": 1},
                "horizon": {"type": "integer", "minimum": 1},
                "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
            "additionalProperties": False,
        },
    },
    "required": ["experiment"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def _det(name, kind, **params):
    return {"name": name, "kind": kind, "params": params}


def _defaults(experiment: str, scale: str) -> dict:
    desk = scale == "desk"
    if experiment == "fig1a":
        return {"replications": 500 if desk else 5000, "arl": 1000.0,
                "nu_grid": [1, 50, 100, 200, 400, 800], "model": {"K": 1, "mu": 0.5},
                "detectors": [_det("cusum", "cusum", theta=0.5), _det("sr", "sr", theta=0.5),
                              _det("shiryaev_1e-3", "shiryaev", theta=0.5, rho=0.001),
                              _det("shiryaev_2e-2", "shiryaev", theta=0.5, rho=0.02)]}
    if experiment == "fig1b":
        return {"replications": 500 if desk else 2000, "nu": 1,
                "gammas": [100.0, 300.0] if desk else [100.0, 300.0, 1000.0],
                "model": {"K": 1, "mu": 0.5},
                "detectors": [_det("cusum", "cusum", theta=0.5), _det("sr", "sr", theta=0.5)]}
    if experiment == "fig2":
        K = 50 if desk else 100
        return {"replications": 500 if desk else 1000, "arl": 1000.0, "nu": 100,
                "model": {"K": K, "kl": 0.5},
                "L_grid": [1, 12, 25, 50] if desk else [1, 25, 50, 100],
                "detectors": [_det("xs", "xs", p=1.0 / math.sqrt(K), window=200),
                              _det("wl_ml", "wl_bank", windows=[30, 40, 50, 60, 70, 80], estimator="ml"),
                              _det("wl_js", "wl_bank", windows=[30, 40, 50, 60, 70, 80], estimator="js_plus"),
                              _det("glr", "glr", window=200)]}
    if experiment == "fdr":
        return {"replications": 500 if desk else 2000, "model": {"K": 20, "mu": 0.5},
                "fdr": {"rho": 0.01, "alphas": [0.1, 0.2], "horizon": 2000,
                        "n_grid": [100, 250, 500, 1000, 2000]}}
    return {"replications": 500 if desk else 2000, "arl": 1000.0, "nu": 1, "model": {"K": 1, "mu": 0.5},
            "theta_rule": "fixed"}


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {exc.message}") from None
    for det in cfg.get("detectors", []):
        try:
            DetectorSpec(det["kind"], 1, det.get("params", {}))
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
    if cfg["experiment"] == "custom" and "detectors" not in cfg:
        raise ConfigError("custom experiments need a detector list")


def resolve_config(cfg: dict, *, scale: str | None = None, seed: int | None = None,
                   reps: int | None = None) -> dict:
    """Validate, apply command-line overrides and fill the experiment defaults."""
    cfg = copy.deepcopy(cfg)
    validate_config(cfg)
    if scale is not None:
        cfg["scale"] = scale
    cfg.setdefault("scale", "paper")
    base = _defaults(cfg["experiment"], cfg["scale"])
    model = dict(base.get("model", {}))
    model.update(cfg.get("model", {}))
    if cfg["scale"] == "desk" and cfg["experiment"] == "fig2" and "K" not in cfg.get("model", {}):
        model["K"] = 50
    base.update({k: v for k, v in cfg.items() if k != "model"})
    base["model"] = model
    if seed is not None:
        base["seed"] = seed
    if reps is not None:
        base["replications"] = reps
    base.setdefault("seed", 0)
    base.setdefault("tolerance", 0.02)
    validate_config(base)
    return base


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ResultTable:
    experiment: str
    seed: int
    config_hash: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    columns = ("experiment", "detector", "parameter", "value", "estimate", "std_error",
               "replications", "threshold", "censored", "excluded", "seed", "config_hash")

    def add(self, detector, parameter, value, estimate, std_error, replications, threshold,
            censored=0, excluded=0):
        self.rows.append({"experiment": self.experiment, "detector": detector, "parameter": parameter,
                          "value": value, "estimate": estimate, "std_error": std_error,
                          "replications": replications, "threshold": threshold,
                          "censored": censored, "excluded": excluded, "seed": self.seed,
                          "config_hash": self.config_hash})

    def select(self, detector=None, parameter=None) -> list[dict]:
        return [r for r in self.rows if (detector is None or r["detector"] == detector)
                and (parameter is None or r["parameter"] == parameter)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in (r[c] for c in self.columns)])
        return buf.getvalue()


def _mc(cfg, reps_key="replications", first_index=0) -> MCConfig:
    return MCConfig(replications=cfg.get(reps_key, cfg["replications"]), horizon=cfg.get("horizon"),
                    seed=cfg["seed"], tolerance=cfg["tolerance"], first_index=first_index)


def _cache(cfg):
    path = cfg.get("cache")
    return CalibrationCache(path) if path else None


def _spec(det, K) -> DetectorSpec:
    return DetectorSpec(det["kind"], K, det.get("params", {}))


def _name(det) -> str:
    return det.get("name", det["kind"])


def _calibrate(spec, gamma, cfg):
    mc = _mc(cfg, "calibration_replications")
    return calibrate_threshold(spec, gamma, mc, cache=_cache(cfg))


def _fixed_theta(cfg):
    model = cfg["model"]
    K = model.get("K", 1)
    if "theta" in model:
        return np.broadcast_to(np.asarray(model["theta"], dtype=float), (K,)).copy()
    return np.full(K, model.get("mu", 0.5))


def _delay_row(table, name, spec, cal, scenario, cfg, gamma, parameter, value):
    d = estimate_delay(spec, cal.threshold, scenario, _mc(cfg), gamma=gamma)
    table.add(name, parameter, value, d.estimate, d.std_error, d.replications, cal.threshold,
              d.censored_count, d.excluded)
    return d


def _fit_slope(x, y):
    slope, intercept = np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)
    return float(slope), float(intercept)


def run_fig1a(cfg: dict) -> ResultTable:
    """Delay versus change point at a common ARL for the single-stream procedures."""
    table = ResultTable("fig1a", cfg["seed"], config_hash(cfg))
    theta = _fixed_theta(cfg)
    gamma = cfg["arl"]
    for det in cfg["detectors"]:
        spec = _spec(det, theta.shape[0])
        cal = _calibrate(spec, gamma, cfg)
        table.summary.setdefault("calibration", {})[_name(det)] = {
            "threshold": cal.threshold, "arl": cal.report.estimate, "arl_se": cal.report.std_error}
        for nu in cfg["nu_grid"]:
            _delay_row(table, _name(det), spec, cal, ChangeScenario.fixed(theta, nu), cfg, gamma, "nu", nu)
    return table


def run_fig1b(cfg: dict) -> ResultTable:
    """Worst-case delay (change at the start) versus log ARL, with a fitted slope."""
    table = ResultTable("fig1b", cfg["seed"], config_hash(cfg))
    theta = _fixed_theta(cfg)
    nu = cfg.get("nu", 1)
    fits = {}
    for det in cfg["detectors"]:
        spec = _spec(det, theta.shape[0])
        xs, ys = [], []
        for gamma in cfg["gammas"]:
            cal = _calibrate(spec, gamma, cfg)
            d = _delay_row(table, _name(det), spec, cal, ChangeScenario.fixed(theta, nu), cfg, gamma,
                           "log_gamma", math.log(gamma))
            xs.append(math.log(gamma))
            ys.append(d.estimate)
        if len(xs) >= 2:
            slope, intercept = _fit_slope(xs, ys)
            fits[_name(det)] = {"slope": slope, "intercept": intercept}
    table.summary["fits"] = fits
    table.summary["kl"] = 0.5 * float(theta @ theta)
    return table


def run_fig2(cfg: dict) -> ResultTable:
    """Delay versus number of affected streams, sparse-random post-change means."""
    table = ResultTable("fig2", cfg["seed"], config_hash(cfg))
    K = cfg["model"]["K"]
    kl = cfg["model"].get("kl", 0.5)
    gamma, nu = cfg["arl"], cfg.get("nu", 100)
    for L in cfg["L_grid"]:
        if L > K:
            raise ConfigError(f"L = {L} exceeds K = {K}")
    for det in cfg["detectors"]:
        spec = _spec(det, K)
        cal = _calibrate(spec, gamma, cfg)
        table.summary.setdefault("calibration", {})[_name(det)] = {
            "threshold": cal.threshold, "arl": cal.report.estimate, "arl_se": cal.report.std_error}
        for L in cfg["L_grid"]:
            scen = ChangeScenario(K, nu, SparseRandom(L, kl))
            _delay_row(table, _name(det), spec, cal, scen, cfg, gamma, "L", L)
    return table


def run_fdr(cfg: dict) -> ResultTable:
    """FDR and FNR of the common-threshold Bayesian procedure versus ``n`` and ``alpha``."""
    table = ResultTable("fdr", cfg["seed"], config_hash(cfg))
    f = cfg["fdr"]
    theta = _fixed_theta(cfg)
    K = theta.shape[0]
    horizon = f.get("horizon", 2000)
    n_grid = sorted(set([n for n in f.get("n_grid", []) if n <= horizon] + [horizon]))
    per_rep = []
    for alpha in f["alphas"]:
        ens = bayes_common_threshold_ensemble(K, theta, f["rho"], alpha, horizon, cfg["replications"],
                                              cfg["seed"])
        name = f"alpha={alpha!r}"
        for n in n_grid:
            e = fdr_estimate(ens, n)
            table.add(name, "fdr_n", n, e.estimate, e.std_error, e.replications, 1.0 - alpha)
            e = fnr_estimate(ens, n)
            table.add(name, "fnr_n", n, e.estimate, e.std_error, e.replications, 1.0 - alpha)
        ratios = fdr_ratios(ens, horizon)
        for i in range(len(ens)):
            V, R = count_vr(ens[i], horizon)
            per_rep.append((alpha, i, V, R, float(ratios[i])))
    table.summary["per_replication"] = per_rep
    return table


def run_custom(cfg: dict) -> ResultTable:
    """Calibrate each listed detector to ``arl`` and estimate its delay at ``nu``."""
    table = ResultTable("custom", cfg["seed"], config_hash(cfg))
    model = cfg["model"]
    K = model.get("K", 1)
    gamma, nu = cfg["arl"], cfg.get("nu", 1)
    if cfg.get("theta_rule", "fixed") == "sparse":
        scen = ChangeScenario(K, nu, SparseRandom(cfg.get("L_grid", [1])[0], model.get("kl", 0.5)))
    else:
        scen = ChangeScenario.fixed(_fixed_theta(cfg), nu)
    for det in cfg["detectors"]:
        spec = _spec(det, K)
        cal = _calibrate(spec, gamma, cfg)
        table.add(_name(det), "arl", gamma, cal.report.estimate, cal.report.std_error,
                  cal.report.replications, cal.threshold, cal.report.censored_count, 0)
        _delay_row(table, _name(det), spec, cal, scen, cfg, gamma, "nu", nu)
    return table


_RUNNERS = {"fig1a": run_fig1a, "fig1b": run_fig1b, "fig2": run_fig2, "fdr": run_fdr, "custom": run_custom}


def run_experiment(cfg: dict) -> ResultTable:
    return _RUNNERS[cfg["experiment"]](cfg)


_PLOT_SCRIPT = '''"""Plot {experiment} results from results.csv (generated file)."""
import csv
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
curves = defaultdict(list)
with open(os.path.join(here, "results.csv"), newline="") as fh:
    for row in csv.DictReader(fh):
        if row["parameter"] in {params!r}:
            key = (row["detector"], row["parameter"])
            curves[key].append((float(row["value"]), float(row["estimate"]), float(row["std_error"])))

fig, ax = plt.subplots(figsize=(6, 4))
for (det, par), pts in sorted(curves.items()):
    pts.sort()
    x, y, se = zip(*pts)
    ax.errorbar(x, y, yerr=[2 * s for s in se], marker="o", capsize=2, label=det if len({params!r}) == 1 else det + " " + par)
ax.set_xlabel({xlabel!r})
ax.set_ylabel({ylabel!r})
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "{experiment}.png"), dpi=150)
'''

_PLOT_AXES = {
    "fig1a": (("nu",), "change point nu", "E(T - nu | T >= nu)"),
    "fig1b": (("log_gamma",), "log ARL", "delay at nu = 1"),
    "fig2": (("L",), "affected streams L", "E(T - nu | T >= nu)"),
    "fdr": (("fdr_n", "fnr_n"), "n", "rate"),
    "custom": (("nu",), "nu", "delay"),
}


def write_outputs(table: ResultTable, cfg: dict, out_dir: str, wall_time: float) -> dict:
    """Write ``results.csv``, ``metadata.json`` and ``plot_<experiment>.py`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"csv": os.path.join(out_dir, "results.csv"),
             "metadata": os.path.join(out_dir, "metadata.json"),
             "plot": os.path.join(out_dir, f"plot_{table.experiment}.py")}
    with open(paths["csv"], "w", encoding="utf-8", newline="") as fh:
        fh.write(table.to_csv())
    summary = dict(table.summary)
    per_rep = summary.pop("per_replication", None)
    if per_rep is not None:
        paths["replications"] = os.path.join(out_dir, "replications.csv")
        with open(paths["replications"], "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["alpha", "replication", "V", "R", "fdr_contribution", "seed", "config_hash"])
            for row in per_rep:
                w.writerow(list(row) + [table.seed, table.config_hash])
            for alpha in sorted({r[0] for r in per_rep}):
                vals = [r[4] for r in per_rep if r[0] == alpha]
                w.writerow([alpha, "summary", "", "", repr(float(np.mean(vals))), table.seed, table.config_hash])
    meta = {"config": cfg, "config_hash": table.config_hash, "summary": summary,
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__, "qcdkit": _version()},
            "wall_time_seconds": wall_time, "command": sys.argv}
    with open(paths["metadata"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    params, xlabel, ylabel = _PLOT_AXES[table.experiment]
    with open(paths["plot"], "w", encoding="utf-8") as fh:
        fh.write(_PLOT_SCRIPT.format(experiment=table.experiment, params=params, xlabel=xlabel, ylabel=ylabel))
    return paths


def _version():
    from . import __version__
    return __version__


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0
