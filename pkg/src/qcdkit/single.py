"""Single-statistic stopping rules: CuSum, Shiryaev-Roberts, Shiryaev, exp-CuSum.

Each rule comes in two forms. The scalar form is a frozen state plus a pure
``*_step`` function fed with (log-)likelihood ratios; it is the reference
used in tests. The batch form (``*Detector``) advances many independent
copies at once from raw Gaussian observations and is what the Monte Carlo
code runs.

Stopping conventions: CuSum, SR and exp-CuSum alarm on ``statistic > b``,
Shiryaev on ``p >= b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np

from .base import BatchDetector, RunResult, batch_llr, known_theta_llr
from .model import ContractError

__all__ = [
    "CusumState",
    "SrState",
    "ShiryaevState",
    "ExpCusumState",
    "cusum_step",
    "sr_step",
    "shiryaev_step",
    "exp_cusum_step",
    "threshold_from_arl_bound",
    "shiryaev_threshold_from_pfa",
    "run",
    "CusumDetector",
    "SrDetector",
    "ShiryaevDetector",
    "ExpCusumDetector",
]

_TINY = 1e-300


@dataclass(frozen=True)
class CusumState:
    w: float = 0.0
    b: float = math.inf
    stopped: bool = False

    @property
    def statistic(self) -> float:
        return self.w


@dataclass(frozen=True)
class SrState:
    r: float = 0.0
    b: float = math.inf
    stopped: bool = False

    @property
    def statistic(self) -> float:
        return self.r


@dataclass(frozen=True)
class ShiryaevState:
    """Posterior probability ``p`` that the change has already happened.

    Use :meth:`initial` to start from ``p0 = rho``.
    """

    p: float
    rho: float
    b: float = 1.0
    stopped: bool = False

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ContractError(f"rho must lie in (0, 1), got {self.rho}")
        if not 0.0 <= self.p <= 1.0:
            raise ContractError(f"p must lie in [0, 1], got {self.p}")

    @classmethod
    def initial(cls, rho: float, b: float = 1.0) -> "ShiryaevState":
        return cls(p=rho, rho=rho, b=b)

    @property
    def statistic(self) -> float:
        return self.p

    @property
    def odds(self) -> float:
        return self.p / (1.0 - self.p) if self.p < 1.0 else math.inf


@dataclass(frozen=True)
class ExpCusumState:
    w: float = 0.0
    log_beta: float = 0.0
    b: float = math.inf
    stopped: bool = False

    @classmethod
    def from_beta(cls, beta: float, b: float = math.inf) -> "ExpCusumState":
        if not beta > 0:
            raise ContractError(f"beta must be positive, got {beta}")
        return cls(w=0.0, log_beta=math.log(beta), b=b)

    @property
    def statistic(self) -> float:
        return self.w


def _finite(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ContractError(f"{name} must be finite, got {value}")
    return value


def cusum_step(state: CusumState, llr: float) -> CusumState:
    llr = _finite(llr, "llr")
    if state.w < 0:
        raise ContractError("CuSum statistic must be nonnegative")
    w = max(0.0, state.w + llr)
    return replace(state, w=w, stopped=w > state.b)


def sr_step(state: SrState, lr: float) -> SrState:
    lr = float(lr)
    if not lr >= 0:
        raise ContractError(f"likelihood ratio must be nonnegative, got {lr}")
    r = (1.0 + state.r) * lr
    return replace(state, r=r, stopped=r > state.b)


def shiryaev_step(state: ShiryaevState, lr: float) -> ShiryaevState:
    lr = float(lr)
    if not lr >= 0:
        raise ContractError(f"likelihood ratio must be nonnegative, got {lr}")
    pt = state.p + (1.0 - state.p) * state.rho
    if math.isinf(lr):
        p = 1.0
    else:
        num = pt * lr
        p = num / max(num + (1.0 - pt), _TINY)
    return replace(state, p=min(p, 1.0), stopped=p >= state.b)


def exp_cusum_step(state: ExpCusumState, llr: float) -> ExpCusumState:
    llr = _finite(llr, "llr")
    w = max(0.0, state.w) + llr + state.log_beta
    return replace(state, w=w, stopped=w > state.b)


def threshold_from_arl_bound(gamma: float) -> float:
    """Threshold ``log gamma`` guaranteeing CuSum (and SR in log scale) ARL >= gamma."""
    if not gamma > 1:
        raise ContractError(f"gamma must exceed 1, got {gamma}")
    return math.log(gamma)


def shiryaev_threshold_from_pfa(alpha: float) -> float:
    """Posterior threshold ``1 - alpha`` which keeps ``P(T < nu) <= alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")
    return 1.0 - alpha


def run(step: Callable, state, inputs: Iterable[float]) -> RunResult:
    """Fold ``step`` over ``inputs`` until the state reports a stop.

    Running out of inputs is reported as censoring, never as a stop.
    """
    n = 0
    for n, value in enumerate(inputs, start=1):
        state = step(state, value)
        if state.stopped:
            return RunResult(n, state.statistic, False)
    return RunResult(None, state.statistic, True)


class _KnownThetaDetector(BatchDetector):
    def __init__(self, n: int, K: int = 1, theta=0.5):
        super().__init__(n, K)
        self.theta, self._half = known_theta_llr(theta, K)

    def _llr(self, x, mask):
        return batch_llr(x, self.theta, self._half, mask)


class CusumDetector(_KnownThetaDetector):
    _fields = ("w",)

    def __init__(self, n: int, K: int = 1, theta=0.5):
        super().__init__(n, K, theta)
        self.w = np.zeros(self.n)

    def _step(self, x, mask):
        np.maximum(self.w + self._llr(x, mask), 0.0, out=self.w)
        return self.w.copy()

    @property
    def statistic(self):
        return self.w.copy()


class SrDetector(_KnownThetaDetector):
    _fields = ("r",)

    def __init__(self, n: int, K: int = 1, theta=0.5):
        super().__init__(n, K, theta)
        self.r = np.zeros(self.n)

    def _step(self, x, mask):
        self.r = (1.0 + self.r) * np.exp(np.minimum(self._llr(x, mask), 700.0))
        return self.r.copy()

    @property
    def statistic(self):
        return self.r.copy()


class ShiryaevDetector(_KnownThetaDetector):
    strict = False
    _fields = ("p",)

    def __init__(self, n: int, K: int = 1, theta=0.5, rho: float = 0.01):
        super().__init__(n, K, theta)
        if not 0.0 < rho < 1.0:
            raise ContractError(f"rho must lie in (0, 1), got {rho}")
        self.rho = float(rho)
        self.p = np.full(self.n, self.rho)

    def _step(self, x, mask):
        pt = self.p + (1.0 - self.p) * self.rho
        num = pt * np.exp(np.minimum(self._llr(x, mask), 700.0))
        self.p = np.minimum(num / np.maximum(num + (1.0 - pt), _TINY), 1.0)
        return self.p.copy()

    @property
    def statistic(self):
        return self.p.copy()

    @property
    def odds(self):
        with np.errstate(divide="ignore"):
            return self.p / (1.0 - self.p)


class ExpCusumDetector(_KnownThetaDetector):
    _fields = ("w",)

    def __init__(self, n: int, K: int = 1, theta=0.5, beta: float = 1.0):
        super().__init__(n, K, theta)
        if not beta > 0:
            raise ContractError(f"beta must be positive, got {beta}")
        self.log_beta = math.log(beta)
        self.w = np.zeros(self.n)

    def _step(self, x, mask):
        self.w = np.maximum(self.w, 0.0) + self._llr(x, mask) + self.log_beta
        return self.w.copy()

    @property
    def statistic(self):
        return self.w.copy()
