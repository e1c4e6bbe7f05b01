"""Monte Carlo run lengths, detection delays, false-alarm probabilities and threshold search.

The engine is :class:`FirstPassage`. It simulates every replication until
its statistic crosses a cap (or the horizon), recording each time the
running maximum of the statistic is broken. The stop time for any threshold
``b <= cap`` is then the first record that crosses ``b``, so one simulated
ensemble answers ARL queries for all thresholds at once, and raising the cap
resumes the paths where they left off. Calibration thus uses common random
numbers across all probed thresholds by construction.

Replication ``i`` draws from ``RngStream(seed, first_index + i, phase)``;
calibration runs in phase 0 and evaluation runs in phase 1, so a threshold
is never scored on the paths it was tuned on.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .model import NEVER, ChangeScenario, ContractError, GeometricPrior, kl_divergence
from .noise import BlockSource, replication_streams
from .registry import DetectorSpec, from_scale, to_scale

__all__ = [
    "MCConfig",
    "MonteCarloReport",
    "CalibrationResult",
    "CalibrationError",
    "DegenerateCalibrationWarning",
    "FirstPassage",
    "estimate_arl",
    "estimate_delay",
    "estimate_pfa",
    "calibrate_threshold",
    "default_delay_horizon",
    "CalibrationCache",
]

CALIBRATION_PHASE = 0
EVALUATION_PHASE = 1
# ARL runs without a target get this horizon
DEFAULT_ARL_HORIZON = 100_000


class CalibrationError(RuntimeError):
    """The threshold search could not bracket the target."""


class DegenerateCalibrationWarning(UserWarning):
    pass


class MonteCarloError(RuntimeError):
    """Every replication was censored or excluded, so there is no estimate."""


@dataclass(frozen=True)
class MCConfig:
    replications: int = 2000
    horizon: int | None = None
    seed: int = 0
    target_arl: float | None = None
    target_pfa: float | None = None
    tolerance: float = 0.05
    first_index: int = 0

    def __post_init__(self):
        if self.replications < 2:
            raise ContractError("need at least 2 replications for a standard error")
        if self.horizon is not None and self.horizon < 1:
            raise ContractError("horizon must be positive")
        if not self.tolerance > 0:
            raise ContractError("tolerance must be positive")

    def arl_horizon(self, gamma: float | None = None) -> int:
        if self.horizon is not None:
            return self.horizon
        gamma = gamma or self.target_arl
        return int(math.ceil(20 * gamma)) if gamma else DEFAULT_ARL_HORIZON


@dataclass(frozen=True)
class MonteCarloReport:
    estimate: float
    std_error: float
    censored_count: int
    replications: int
    threshold: float
    horizon: int
    lower_bound: bool = False
    #: replications left out of the estimate (false alarms in delay runs)
    excluded: int = 0

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.estimate - z * self.std_error, self.estimate + z * self.std_error


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    report: MonteCarloReport
    target: float
    bracket: tuple
    iterations: int
    degenerate: bool = False


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    se = float(values.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return float(values.mean()), se


class FirstPassage:
    """Resumable first-passage simulation of one detector over many replications.

    ``scenario`` defaults to no change. ``limit`` optionally stops each
    replication earlier than the horizon (per-replication array of ticks).
    """

    def __init__(self, spec: DetectorSpec, replications: int, horizon: int, seed: int = 0,
                 phase: int = CALIBRATION_PHASE, scenario: ChangeScenario | None = None,
                 first_index: int = 0, limit=None):
        K = spec.K
        n = int(replications)
        self.spec = spec
        self.n = n
        self.horizon = int(horizon)
        streams = replication_streams(seed, range(first_index, first_index + n), phase)
        self.det = spec.build(n, streams)
        self.strict = self.det.strict
        self.noise = BlockSource(streams, K)
        if scenario is None:
            self.theta = np.zeros((n, K))
            self.nu = np.full((n, K), NEVER)
        else:
            if scenario.K != K:
                raise ContractError("scenario and detector disagree on K")
            self.theta = np.stack([scenario.draw_theta(s) for s in streams])
            self.nu = np.stack([scenario.draw_change_points(s) for s in streams])
        lim = np.full(n, self.horizon, dtype=np.int64)
        if limit is not None:
            lim = np.minimum(lim, np.asarray(limit, dtype=np.int64))
        self.limit = lim
        self.runmax = np.full(n, -np.inf)
        self.exhausted = lim <= 0
        self.cap = -np.inf
        self._rec = ([], [], [])

    @property
    def change_time(self) -> np.ndarray:
        """First change across streams for each replication (``inf`` if none)."""
        return self.nu.min(axis=1)

    def _crossed(self, stat, b):
        return stat > b if self.strict else stat >= b

    def advance(self, cap: float) -> None:
        """Simulate until every replication has crossed ``cap`` or reached its limit."""
        if cap <= self.cap:
            return
        self.cap = cap
        idx = np.flatnonzero(~self.exhausted & ~self._crossed(self.runmax, cap))
        if idx.size == 0:
            return
        det = self.det
        sub = det.take(idx)
        rr, rt, rv = self._rec
        while idx.size:
            tick = sub.t + 1
            x = self.noise.draw(idx)
            x += np.where(tick[:, None] >= self.nu[idx], self.theta[idx], 0.0)
            stat = sub.step(x)
            rec = stat > self.runmax[idx]
            if rec.any():
                rr.append(idx[rec])
                rt.append(tick[rec])
                rv.append(stat[rec])
                self.runmax[idx[rec]] = stat[rec]
            hit = self._crossed(stat, cap)
            out = tick >= self.limit[idx]
            fin = hit | out
            if fin.any():
                self.exhausted[idx[out & ~hit]] = True
                loc = np.flatnonzero(fin)
                det.put(idx[loc], sub.take(loc))
                keep = np.flatnonzero(~fin)
                idx = idx[keep]
                if idx.size:
                    sub = sub.take(keep)

    def _records(self):
        rr, rt, rv = self._rec
        if not rr:
            return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
        return np.concatenate(rr), np.concatenate(rt), np.concatenate(rv)

    def stop_times(self, b: float) -> np.ndarray:
        """Stop time per replication at threshold ``b`` (``inf`` past the limit)."""
        if b > self.cap:
            raise ContractError(f"threshold {b} lies above the simulated cap {self.cap}")
        rows, ticks, vals = self._records()
        hit = self._crossed(vals, b)
        T = np.full(self.n, np.inf)
        np.minimum.at(T, rows[hit], ticks[hit].astype(float))
        return T

    def arl(self, b: float) -> MonteCarloReport:
        T = self.stop_times(b)
        cens = np.isinf(T)
        est, se = _mean_se(np.where(cens, self.limit, T))
        return MonteCarloReport(est, se, int(cens.sum()), self.n, float(b), self.horizon,
                                lower_bound=bool(cens.any()))


def estimate_arl(spec: DetectorSpec, b: float, cfg: MCConfig, phase: int = EVALUATION_PHASE) -> MonteCarloReport:
    """Mean stop time with no change. Censored runs count at the horizon (lower bound)."""
    if not math.isfinite(b):
        raise ContractError("threshold must be finite")
    fp = FirstPassage(spec, cfg.replications, cfg.arl_horizon(), cfg.seed, phase,
                      first_index=cfg.first_index)
    fp.advance(b)
    rep = fp.arl(b)
    if rep.censored_count == rep.replications:
        raise MonteCarloError(f"all {rep.replications} replications were censored at horizon {rep.horizon}")
    return rep


def default_delay_horizon(nu: float, gamma: float, kl: float) -> int:
    """``50 nu + 10 log(gamma) / I`` ticks."""
    if not kl > 0:
        raise ContractError("default delay horizon needs a positive KL divergence")
    return int(50 * nu + math.ceil(10 * math.log(max(gamma, math.e)) / kl))


def _scenario_kl(scenario: ChangeScenario) -> float:
    rule = scenario.rule
    return rule.kl if hasattr(rule, "kl") else kl_divergence(np.array(rule.theta))


def estimate_delay(spec: DetectorSpec, b: float, scenario: ChangeScenario, cfg: MCConfig,
                   gamma: float | None = None, phase: int = EVALUATION_PHASE) -> MonteCarloReport:
    """``E(T - nu | T >= nu)`` with ``nu`` the first change across streams.

    Runs that alarm before the change are excluded and counted in
    ``excluded``; runs censored after the change count at the horizon.
    """
    if isinstance(scenario.change_points, GeometricPrior):
        nu_hint = 1.0 / scenario.change_points.rho
    else:
        nu_hint = float(np.min(scenario.change_points))
    if not math.isfinite(nu_hint):
        raise ContractError("delay needs a finite change point")
    horizon = cfg.horizon or default_delay_horizon(nu_hint, gamma or cfg.target_arl or 1000.0,
                                                   _scenario_kl(scenario))
    fp = FirstPassage(spec, cfg.replications, horizon, cfg.seed, phase, scenario, cfg.first_index)
    fp.advance(b)
    T = fp.stop_times(b)
    nu = fp.change_time
    survive = (T >= nu) & np.isfinite(nu)
    if not survive.any():
        raise MonteCarloError("no replication survived to the change point")
    cens = survive & np.isinf(T)
    d = np.where(cens, fp.limit - nu + 1, T - nu)[survive]
    est, se = _mean_se(d)
    return MonteCarloReport(est, se, int(cens.sum()), cfg.replications, float(b), horizon,
                            lower_bound=bool(cens.any()), excluded=int((~survive).sum()))


def estimate_pfa(spec: DetectorSpec, b: float, rho: float, cfg: MCConfig,
                 theta=None, phase: int = EVALUATION_PHASE) -> MonteCarloReport:
    """Fraction of runs with ``T < nu``, ``nu`` geometric per stream (first change used).

    Only pre-change ticks matter, so each run stops at ``nu - 1``; runs whose
    change lies beyond the horizon count as censored.
    """
    if not 0.0 < rho <= 1.0:
        raise ContractError(f"rho must lie in (0, 1], got {rho}")
    horizon = cfg.horizon or cfg.arl_horizon()
    th = np.zeros(spec.K) if theta is None else theta
    scen = ChangeScenario(spec.K, GeometricPrior(rho), th)
    streams = replication_streams(cfg.seed, range(cfg.first_index, cfg.first_index + cfg.replications), phase)
    nu = np.stack([scen.draw_change_points(s) for s in streams]).min(axis=1)
    fp = FirstPassage(spec, cfg.replications, horizon, cfg.seed, phase, scen, cfg.first_index,
                      limit=np.minimum(nu - 1, horizon))
    fp.advance(b)
    T = fp.stop_times(b)
    false_alarm = (T < nu).astype(float)
    est, se = _mean_se(false_alarm)
    cens = int((nu - 1 > horizon).sum())
    return MonteCarloReport(est, se, cens, cfg.replications, float(b), horizon, lower_bound=cens > 0)


def calibrate_threshold(spec: DetectorSpec, gamma: float, cfg: MCConfig, max_expansions: int = 200,
                        step: float = 0.5, cache: "CalibrationCache | None" = None) -> CalibrationResult:
    """Threshold whose Monte Carlo ARL is within ``cfg.tolerance`` of ``gamma``.

    The cap is raised in steps of ``step`` (in the detector's threshold
    coordinate) until the ARL at the cap reaches ``gamma``; the bracket is then
    bisected on the recorded paths. When the ARL jumps over the tolerance band
    (step-function ARL), the smallest threshold with ``ARL >= gamma`` is
    returned with a :class:`DegenerateCalibrationWarning`.
    """
    if not gamma > 1:
        raise ContractError(f"target ARL must exceed 1, got {gamma}")
    if cache is not None:
        hit = cache.get(spec, gamma, cfg)
        if hit is not None:
            return hit
    scale = spec.scale
    lo_b, hi_b = spec.bracket(gamma)
    lo, hi = to_scale(lo_b, scale), to_scale(hi_b, scale)
    fp = FirstPassage(spec, cfg.replications, cfg.arl_horizon(gamma), cfg.seed, CALIBRATION_PHASE,
                      first_index=cfg.first_index)

    def arl_at(u):
        return fp.arl(from_scale(u, scale))

    # raise the cap until the ARL there reaches the target
    cap = lo
    fp.advance(from_scale(cap, scale))
    expansions = 0
    while arl_at(cap).estimate < gamma:
        if expansions >= max_expansions or np.all(fp.exhausted):
            r = arl_at(cap)
            raise CalibrationError(
                f"{spec.kind}: ARL {r.estimate:.4g} at threshold {from_scale(cap, scale):.6g} "
                f"is still below {gamma} after {expansions} expansions "
                f"(censored {r.censored_count}/{r.replications}, horizon {r.horizon})")
        cap += step
        fp.advance(from_scale(cap, scale))
        expansions += 1
    hi = cap
    span = to_scale(hi_b, scale) - to_scale(lo_b, scale)
    width = max(span, 1.0) if math.isfinite(span) else 1.0
    lo = min(lo, hi - step)
    tries = 0
    while arl_at(lo).estimate > gamma:
        lo -= width
        tries += 1
        if tries > max_expansions:
            raise CalibrationError(f"{spec.kind}: no threshold gives ARL below {gamma}")

    def close(r):
        return abs(r.estimate / gamma - 1.0) <= cfg.tolerance

    iterations = 0
    degenerate = False
    best = hi
    if close(arl_at(hi)):
        best = hi
    elif close(arl_at(lo)):
        best = lo
    else:
        while True:
            iterations += 1
            mid = 0.5 * (lo + hi)
            r = arl_at(mid)
            if close(r):
                best = mid
                break
            if r.estimate < gamma:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-9 * max(1.0, abs(hi)) or iterations >= 200:
                best = hi
                degenerate = True
                warnings.warn(
                    f"{spec.kind}: empirical ARL jumps across the target {gamma} "
                    f"(ARL {arl_at(lo).estimate:.4g} -> {arl_at(hi).estimate:.4g}); "
                    f"returning the smallest bracketing threshold",
                    DegenerateCalibrationWarning, stacklevel=2)
                break
    b = from_scale(best, scale)
    res = CalibrationResult(b, fp.arl(b), float(gamma), (from_scale(lo, scale), from_scale(hi, scale)),
                            iterations, degenerate)
    if cache is not None:
        cache.put(spec, gamma, cfg, res)
    return res


class CalibrationCache:
    """Calibrated thresholds stored as JSON lines ``{version, key, threshold, arl, se}``."""

    VERSION = 1

    def __init__(self, path):
        self.path = os.fspath(path)

    def key(self, spec: DetectorSpec, gamma: float, cfg: MCConfig) -> str:
        doc = {"version": self.VERSION, "spec": spec.key, "gamma": float(gamma),
               "cfg": {k: v for k, v in asdict(cfg).items() if k not in ("target_arl", "target_pfa")}}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def _rows(self):
        if not os.path.exists(self.path):
            return
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    row = json.loads(line)
                    if row.get("version") == self.VERSION:
                        yield row

    def get(self, spec, gamma, cfg) -> CalibrationResult | None:
        key = self.key(spec, gamma, cfg)
        for row in self._rows():
            if row["key"] == key:
                r = row["report"]
                return CalibrationResult(row["threshold"], MonteCarloReport(**r), float(gamma),
                                         tuple(row["bracket"]), row["iterations"], row["degenerate"])
        return None

    def put(self, spec, gamma, cfg, res: CalibrationResult) -> None:
        row = {"version": self.VERSION, "key": self.key(spec, gamma, cfg), "spec": spec.key,
               "gamma": float(gamma), "threshold": res.threshold, "arl": res.report.estimate,
               "se": res.report.std_error, "report": asdict(res.report),
               "bracket": list(res.bracket), "iterations": res.iterations, "degenerate": res.degenerate}
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(row) + "\n")
