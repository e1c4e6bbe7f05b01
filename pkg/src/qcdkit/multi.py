"""Multi-stream detectors for a change in the mean of a Gaussian vector.

* :class:`GlrBankDetector` / :class:`MixtureDetector`: one CuSum per
  candidate post-change mean in a finite bank, combined by max or by a
  prior-weighted sum.
* :class:`SumCusumDetector`: sum of per-stream CuSums.
* :class:`XsDetector`: window-limited mixture over the fraction ``p`` of
  affected streams, with unrestricted per-stream GLR (``p=1`` is the plain
  GLR-CuSum).
* :class:`WlBankDetector`: window-limited CuSum with a plug-in estimate of
  the post-change mean; several window sizes may run side by side and the
  bank alarms when any member crosses the shared threshold.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .base import BatchDetector
from .estimators import estimator_from_config
from .model import ContractError

__all__ = [
    "ThetaBank",
    "GlrBankDetector",
    "MixtureDetector",
    "SumCusumDetector",
    "XsDetector",
    "GlrWindowDetector",
    "WlBankDetector",
    "WlCusumDetector",
]


@dataclass(frozen=True)
class ThetaBank:
    """Finite set of candidate post-change means with prior weights."""

    thetas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if thetas.shape[0] == 0 or weights.shape != (thetas.shape[0],):
            raise ContractError("bank needs one positive weight per theta")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ContractError("bank weights must be positive and sum to 1")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, thetas) -> "ThetaBank":
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return cls(thetas, np.full(thetas.shape[0], 1.0 / thetas.shape[0]))

    @classmethod
    def binary(cls, K: int, amplitude: float = 1.0) -> "ThetaBank":
        """All ``2^K - 1`` nonempty affected subsets, each with mean ``amplitude``."""
        rows = [v for v in itertools.product((0.0, 1.0), repeat=K) if any(v)]
        # lexicographic on the index sets, e_1 first
        rows.sort(key=lambda v: [i for i, a in enumerate(v) if a])
        return cls.uniform(amplitude * np.array(rows))

    @property
    def K(self) -> int:
        return self.thetas.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    @property
    def offsets(self) -> np.ndarray:
        """Per-theta thresholds are ``b + offsets``."""
        return -self.log_weights


class _BankDetector(BatchDetector):
    strict = False
    _fields = ("w",)

    def __init__(self, n: int, bank: ThetaBank):
        super().__init__(n, bank.K)
        self.bank = bank
        self._half = np.array([0.5 * float(t @ t) for t in bank.thetas])
        self.w = np.zeros((self.n, bank.thetas.shape[0]))

    def _step(self, x, mask):
        th = self.bank.thetas
        if mask is None:
            ll = x @ th.T - self._half
        else:
            ll = x @ th.T - 0.5 * (mask @ (th * th).T)
        np.maximum(self.w + ll, 0.0, out=self.w)
        return self.statistic

    @property
    def per_theta(self) -> np.ndarray:
        return self.w.copy()


class GlrBankDetector(_BankDetector):
    """Alarm when ``max_theta (W_theta + log p_theta) >= b``."""

    @property
    def statistic(self):
        return np.max(self.w + self.bank.log_weights, axis=1)

    def argmax(self) -> np.ndarray:
        return np.argmax(self.w + self.bank.log_weights, axis=1)


class MixtureDetector(_BankDetector):
    """Alarm when ``log sum_theta p_theta exp(W_theta) >= b``."""

    @property
    def statistic(self):
        return logsumexp(self.w + self.bank.log_weights, axis=1)


class SumCusumDetector(BatchDetector):
    """Sum of local CuSums; zero design components are replaced by ``design_value``."""

    strict = False
    _fields = ("w",)

    def __init__(self, n: int, K: int, theta=0.5, design_value: float = 0.5):
        super().__init__(n, K)
        th = np.broadcast_to(np.asarray(theta, dtype=float), (K,)).copy()
        th[th == 0] = design_value
        if np.any(th == 0):
            raise ContractError("SUM-CuSum needs a nonzero alternative in every stream")
        self.theta = th
        self.w = np.zeros((self.n, K))

    def _step(self, x, mask):
        ll = self.theta * x - 0.5 * self.theta ** 2
        if mask is not None:
            ll = np.where(mask, ll, 0.0)
        np.maximum(self.w + ll, 0.0, out=self.w)
        return self.w.sum(axis=1)

    @property
    def statistic(self):
        return self.w.sum(axis=1)

    @property
    def local(self) -> np.ndarray:
        return self.w.copy()


def _full_mask_only(mask, name):
    if mask is not None and not np.all(mask):
        raise ContractError(f"{name} needs fully observed data")


class XsDetector(BatchDetector):
    """Window-limited mixture statistic

    ``max_m sum_k log(1 - p + p exp(S_k(m, n)^2 / (2 (n - m + 1))))``

    over the ``window`` most recent candidate change times ``m``.
    """

    strict = False
    _fields = ("ring", "head", "csum", "stat")
    _chunk_elems = 1 << 21

    def __init__(self, n: int, K: int, p: float = 0.1, window: int = 200):
        super().__init__(n, K)
        if not 0.0 < p <= 1.0:
            raise ContractError(f"p must lie in (0, 1], got {p}")
        if window < 1:
            raise ContractError("window must be positive")
        self.p = float(p)
        self.window = int(window)
        self.ring = np.zeros((self.n, self.window, K))
        self.head = np.full(self.n, -1, dtype=np.int64)
        self.csum = np.zeros((self.n, K))
        self.stat = np.zeros(self.n)
        # sum of K logs is used when the product could underflow
        self._use_product = self.p < 1.0 and K * math.log10(1.0 / self.p) < 250

    def _step(self, x, mask):
        _full_mask_only(mask, "XS")
        W = self.window
        rows = np.arange(self.n)
        self.head = (self.head + 1) % W
        self.ring[rows, self.head] = self.csum
        self.csum += x
        n_seen = self.t + 1
        lag = (self.head[:, None] - np.arange(W)[None, :]) % W
        half_inv = 0.5 / (lag + 1.0)
        valid = lag < n_seen[:, None]
        out = np.empty(self.n)
        step = max(1, self._chunk_elems // (W * self.K))
        for lo in range(0, self.n, step):
            sl = slice(lo, lo + step)
            S = self.csum[sl, None, :] - self.ring[sl]
            G = S * S
            G *= half_inv[sl, :, None]
            total = G.sum(axis=2)
            if self.p < 1.0:
                if self._use_product:
                    e = np.exp(-G)
                    e *= 1.0 - self.p
                    e += self.p
                    total += np.log(np.prod(e, axis=2))
                else:
                    total += np.log(self.p + (1.0 - self.p) * np.exp(-G)).sum(axis=2)
            total[~valid[sl]] = -np.inf
            out[sl] = total.max(axis=1)
        self.stat = out
        return out.copy()

    @property
    def statistic(self):
        return self.stat.copy()


class GlrWindowDetector(XsDetector):
    """Window-limited GLR-CuSum for an unknown mean vector (``XS`` with ``p = 1``)."""

    def __init__(self, n: int, K: int, window: int = 200):
        super().__init__(n, K, p=1.0, window=window)


class WlBankDetector(BatchDetector):
    """Parallel window-limited CuSums sharing one threshold.

    Member ``i`` uses the last ``windows[i]`` observations (strictly before the
    current tick) to form ``theta_hat`` and updates
    ``W = max(0, W) + theta_hat . x - ||theta_hat||^2 / 2``.
    """

    _fields = ("ring", "head", "sums", "counts", "w")

    def __init__(self, n: int, K: int, windows=(30, 40, 50, 60, 70, 80), estimator="ml",
                 flush_on_reset: bool = False):
        super().__init__(n, K)
        windows = np.atleast_1d(np.asarray(windows, dtype=np.int64))
        if windows.size == 0 or np.any(windows < 1) or np.any(np.diff(windows) <= 0):
            raise ContractError("window sizes must be positive and strictly increasing")
        self.windows = windows
        self.estimator = estimator_from_config(estimator)
        self.flush_on_reset = bool(flush_on_reset)
        M, cap = windows.size, int(windows[-1])
        self.ring = np.zeros((self.n, cap, K))
        self.head = np.full(self.n, -1, dtype=np.int64)
        self.sums = np.zeros((self.n, M, K))
        self.counts = np.zeros((self.n, M), dtype=np.int64)
        self.w = np.zeros((self.n, M))

    def estimates(self) -> np.ndarray:
        """Current plug-in estimates, shape ``(n, members, K)``."""
        m = self.counts
        xbar = self.sums / np.maximum(m, 1)[..., None]
        th = self.estimator.apply(xbar, m)
        return np.where((m > 0)[..., None], th, 0.0)

    def _step(self, x, mask):
        _full_mask_only(mask, "WL-CuSum")
        th = self.estimates()
        ll = np.einsum("nmk,nk->nm", th, x) - 0.5 * np.einsum("nmk,nmk->nm", th, th)
        self.w = np.maximum(self.w, 0.0) + ll
        # window update happens after the statistic: estimates stay causal
        cap = self.ring.shape[1]
        rows = np.arange(self.n)
        full = self.counts >= self.windows[None, :]
        if full.any():
            slots = (self.head[:, None] - self.windows[None, :] + 1) % cap
            old = self.ring[rows[:, None], slots]
            self.sums -= np.where(full[..., None], old, 0.0)
        self.head = (self.head + 1) % cap
        self.ring[rows, self.head] = x
        self.sums += x[:, None, :]
        self.counts = np.minimum(self.counts + 1, self.windows[None, :])
        if self.flush_on_reset:
            reset = self.w <= 0
            self.sums[reset] = 0.0
            self.counts[reset] = 0
        return self.w.max(axis=1)

    @property
    def statistic(self):
        return self.w.max(axis=1)

    @property
    def members(self) -> np.ndarray:
        return self.w.copy()


class WlCusumDetector(WlBankDetector):
    def __init__(self, n: int, K: int, window: int = 50, estimator="ml", flush_on_reset: bool = False):
        super().__init__(n, K, windows=(window,), estimator=estimator, flush_on_reset=flush_on_reset)
