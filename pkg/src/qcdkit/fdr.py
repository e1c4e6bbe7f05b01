"""Per-stream detection with global error rates (FDR, FNR, error over patience).

Stop times and change points are floats; ``NEVER`` (``inf``) marks a stream
that did not stop within the horizon, or that never changes. Censored
streams therefore count as "no detection" in ``V`` and ``R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import NEVER, ChangeScenario, ContractError, GeometricPrior, RngStream
from .noise import BlockSource, replication_streams

__all__ = [
    "StreamwiseDecisions",
    "DecisionEnsemble",
    "FdrReport",
    "MetricEstimate",
    "count_vr",
    "fdr_report",
    "fdr_estimate",
    "fnr_estimate",
    "averaged_fdr",
    "mth_detection_time",
    "eop_estimate",
    "bayes_common_threshold_run",
    "bayes_common_threshold_ensemble",
]


def _times(values) -> np.ndarray:
    arr = np.array([NEVER if v is None else v for v in np.ravel(values)], dtype=float)
    return arr.reshape(np.shape(values))


@dataclass(frozen=True)
class StreamwiseDecisions:
    stop_times: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        t = _times(self.stop_times)
        nu = _times(self.truth)
        if t.ndim != 1 or t.shape != nu.shape:
            raise ContractError("need one stop time and one change point per stream")
        if np.any(t < 1) or np.any(nu < 1):
            raise ContractError("stop times and change points are >= 1")
        object.__setattr__(self, "stop_times", t)
        object.__setattr__(self, "truth", nu)

    @property
    def K(self) -> int:
        return self.stop_times.shape[0]


@dataclass(frozen=True)
class DecisionEnsemble:
    """Replications stacked as ``(R, K)`` arrays."""

    stop_times: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        t = np.atleast_2d(_times(self.stop_times))
        nu = np.atleast_2d(_times(self.truth))
        if t.shape != nu.shape or t.shape[0] == 0:
            raise ContractError("ensemble must be nonempty with matching shapes")
        object.__setattr__(self, "stop_times", t)
        object.__setattr__(self, "truth", nu)

    @classmethod
    def from_decisions(cls, decisions: Sequence[StreamwiseDecisions]) -> "DecisionEnsemble":
        if not decisions:
            raise ContractError("ensemble must be nonempty")
        return cls(np.stack([d.stop_times for d in decisions]), np.stack([d.truth for d in decisions]))

    def __len__(self):
        return self.stop_times.shape[0]

    def __getitem__(self, i) -> StreamwiseDecisions:
        return StreamwiseDecisions(self.stop_times[i], self.truth[i])

    @property
    def K(self) -> int:
        return self.stop_times.shape[1]


def _ensemble(obj) -> DecisionEnsemble:
    if isinstance(obj, DecisionEnsemble):
        return obj
    if isinstance(obj, StreamwiseDecisions):
        return DecisionEnsemble(obj.stop_times[None], obj.truth[None])
    return DecisionEnsemble.from_decisions(list(obj))


@dataclass(frozen=True)
class FdrReport:
    n: int
    V: int
    R: int
    fdr: float
    fnr: float


@dataclass(frozen=True)
class MetricEstimate:
    estimate: float
    std_error: float
    replications: int

    def __float__(self):
        return self.estimate


def _counts(T, nu, n):
    n = np.asarray(n, dtype=float)
    if n.ndim:
        n = n[:, None]
    fired = T <= n
    V = np.sum(fired & (T < nu), axis=-1)
    R = np.sum(fired, axis=-1)
    return V, R


def count_vr(decisions: StreamwiseDecisions, n: int) -> tuple[int, int]:
    """``V(n)`` false detections and ``R(n)`` detections by time ``n``."""
    if n < 1:
        raise ContractError("n must be >= 1")
    V, R = _counts(decisions.stop_times, decisions.truth, n)
    return int(V), int(R)


def fdr_report(decisions: StreamwiseDecisions, n: int) -> FdrReport:
    V, R = count_vr(decisions, n)
    missed = int(np.sum((decisions.truth <= n) & (decisions.stop_times > n)))
    return FdrReport(n, V, R, V / max(1, R), missed / max(1, decisions.K - R))


def _mean_se(values) -> MetricEstimate:
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    se = float(values.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return MetricEstimate(math.fsum(values) / m, se, m)


def fdr_ratios(ensemble, n) -> np.ndarray:
    """Per-replication ``V(n) / max(1, R(n))``; ``n`` may be per-replication."""
    ens = _ensemble(ensemble)
    V, R = _counts(ens.stop_times, ens.truth, n)
    return V / np.maximum(1, R)


def fdr_estimate(ensemble, n: int) -> MetricEstimate:
    if n < 1:
        raise ContractError("n must be >= 1")
    return _mean_se(fdr_ratios(ensemble, n))


def fnr_estimate(ensemble, n: int) -> MetricEstimate:
    if n < 1:
        raise ContractError("n must be >= 1")
    ens = _ensemble(ensemble)
    T, nu = ens.stop_times, ens.truth
    R = np.sum(T <= n, axis=1)
    missed = np.sum((nu <= n) & (T > n), axis=1)
    return _mean_se(missed / np.maximum(1, ens.K - R))


def averaged_fdr(ensemble, n: int) -> float:
    """``sum_nu pi(nu) FDR_nu`` with ``pi`` the empirical law of the sampled change points."""
    ens = _ensemble(ensemble)
    ratios = fdr_ratios(ens, n)
    _, groups = np.unique(ens.truth, axis=0, return_inverse=True)
    groups = np.ravel(groups)
    total = len(ens)
    parts = []
    for g in np.unique(groups):
        sel = groups == g
        count = int(sel.sum())
        parts.append((count / total) * (math.fsum(ratios[sel]) / count))
    return math.fsum(parts)


def mth_detection_time(m: int, horizon: int) -> Callable[[StreamwiseDecisions], int]:
    """``tau = min(m-th detection time, horizon)``."""
    if m < 1 or horizon < 1:
        raise ContractError("m and horizon must be >= 1")

    def tau(dec: StreamwiseDecisions) -> int:
        t = np.sort(dec.stop_times)
        if m <= t.shape[0] and math.isfinite(t[m - 1]):
            return int(min(t[m - 1], horizon))
        return int(horizon)

    return tau


def eop_estimate(ensemble, tau) -> float:
    """``E[FDR at tau] / E[tau]`` for one change scenario and stopping rule.

    ``tau`` is a callable on :class:`StreamwiseDecisions`, a per-replication
    array, or a constant.
    """
    ens = _ensemble(ensemble)
    if callable(tau):
        taus = np.array([tau(ens[i]) for i in range(len(ens))], dtype=float)
    else:
        taus = np.broadcast_to(np.asarray(tau, dtype=float), (len(ens),)).copy()
    if np.any(taus < 1):
        raise ContractError("tau must be >= 1")
    ratios = fdr_ratios(ens, taus)
    return math.fsum(ratios) / math.fsum(taus)


def _common_threshold(alpha):
    if not 0.0 < alpha <= 1.0:
        raise ContractError(f"alpha must lie in (0, 1], got {alpha}")
    return 1.0 - alpha


def bayes_common_threshold_ensemble(K: int, theta, rho: float, alpha: float, horizon: int,
                                    replications: int, seed: int = 0, first_index: int = 0,
                                    phase: int = 1) -> DecisionEnsemble:
    """One Shiryaev recursion per stream, all with the threshold ``1 - alpha``.

    Change points are independent geometric draws per stream; replication
    ``i`` uses the random streams of index ``first_index + i``.
    """
    if not 0.0 < rho < 1.0:
        raise ContractError(f"rho must lie in (0, 1), got {rho}")
    if horizon < 1 or replications < 1:
        raise ContractError("horizon and replications must be positive")
    b = _common_threshold(alpha)
    th = np.broadcast_to(np.asarray(theta, dtype=float), (K,)).copy()
    half = 0.5 * th * th
    scen = ChangeScenario(K, GeometricPrior(rho), th)
    streams = replication_streams(seed, range(first_index, first_index + replications), phase)
    nu = np.stack([scen.draw_change_points(s) for s in streams])
    noise = BlockSource(streams, K)
    rows = np.arange(replications)
    p = np.full((replications, K), rho)
    stop = np.full((replications, K), NEVER)
    for n in range(1, horizon + 1):
        x = noise.draw(rows)
        x += np.where(n >= nu, th, 0.0)
        pt = p + (1.0 - p) * rho
        num = pt * np.exp(np.minimum(th * x - half, 700.0))
        p = np.minimum(num / np.maximum(num + (1.0 - pt), 1e-300), 1.0)
        hit = (p >= b) & np.isinf(stop)
        stop[hit] = n
        if not np.isinf(stop).any():
            break
    return DecisionEnsemble(stop, nu)


def bayes_common_threshold_run(K: int, theta, rho: float, alpha: float, horizon: int,
                               rng: RngStream) -> StreamwiseDecisions:
    """Single replication of :func:`bayes_common_threshold_ensemble`."""
    ens = bayes_common_threshold_ensemble(K, theta, rho, alpha, horizon, 1, rng.seed,
                                          rng.replication_index, rng.phase)
    return ens[0]
