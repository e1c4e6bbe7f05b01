"""Vectorized detector protocol shared by every procedure in the package.

A :class:`BatchDetector` holds the recursive state of ``n`` independent
copies of one procedure (one row per Monte Carlo replication) and advances
all of them by one tick per :meth:`~BatchDetector.step` call.  Detectors only
compute statistics; the threshold comparison is left to the caller so a
single simulated path can be scored against many thresholds.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .model import ContractError


class BatchDetector:
    #: ``True`` stops on ``statistic > b``, ``False`` on ``statistic >= b``.
    strict: bool = True
    #: names of per-row state arrays (leading dimension ``n``)
    _fields: tuple[str, ...] = ()

    def __init__(self, n: int, K: int):
        if n < 1:
            raise ContractError("need at least one row")
        self.n = int(n)
        self.K = int(K)
        self.t = np.zeros(self.n, dtype=np.int64)

    def _state_names(self):
        return ("t",) + tuple(self._fields)

    def _check(self, x, mask):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape != (self.n, self.K):
            raise ContractError(f"expected observations of shape {(self.n, self.K)}, got {x.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 1:
                mask = mask[None, :]
            mask = np.broadcast_to(mask, x.shape)
            # masked-out values are never read
            x = np.where(mask, x, 0.0)
        return x, mask

    def step(self, x, mask=None) -> np.ndarray:
        """Advance every row by one observation; return the new statistics."""
        x, mask = self._check(x, mask)
        stat = self._step(x, mask)
        self.t += 1
        return stat

    def _step(self, x, mask):  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def statistic(self) -> np.ndarray:
        raise NotImplementedError

    def crossed(self, stat, b) -> np.ndarray:
        stat = np.asarray(stat)
        return stat > b if self.strict else stat >= b

    def take(self, idx) -> "BatchDetector":
        """Copy of the rows ``idx`` as a new, independent detector."""
        idx = np.asarray(idx)
        new = copy.copy(self)
        for name in self._state_names():
            setattr(new, name, np.array(getattr(self, name)[idx], copy=True))
        new.n = int(new.t.shape[0])
        return new

    def put(self, idx, other: "BatchDetector") -> None:
        """Write back the rows of ``other`` (obtained by :meth:`take`) into ``idx``."""
        for name in self._state_names():
            getattr(self, name)[idx] = getattr(other, name)

    def copy(self) -> "BatchDetector":
        return self.take(np.arange(self.n))


def known_theta_llr(theta, K: int):
    """Return ``(theta_vector, half_norm_sq)`` for a fixed post-change mean."""
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    if th.shape[0] == 1 and K > 1:
        th = np.full(K, th[0])
    if th.shape != (K,):
        raise ContractError(f"theta has length {th.shape[0]}, expected {K}")
    return th, 0.5 * float(th @ th)


def batch_llr(x, theta, half_sq, mask) -> np.ndarray:
    # column-matrix products, so a one-entry bank reproduces this bit for bit
    if mask is None:
        return (x @ theta[:, None])[:, 0] - half_sq
    return (x @ theta[:, None])[:, 0] - 0.5 * (mask @ (theta * theta)[:, None])[:, 0]


@dataclass(frozen=True)
class RunResult:
    """Outcome of driving one detector over a finite sequence.

    ``stop_time`` is the 1-based alarm tick, or ``None`` when the sequence
    ran out first (``censored`` is then True and ``final`` is the statistic at
    the horizon).
    """

    stop_time: int | None
    final: float
    censored: bool


def run_batch(detector: BatchDetector, xs, b, masks=None) -> list[RunResult]:
    """Drive ``detector`` over ``xs`` of shape ``(N, K)`` or ``(n, N, K)``.

    Rows stop independently; once a row has alarmed its statistic is frozen
    in the result (the detector itself keeps running, which is harmless).
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 2:
        xs = xs[None]
    n, N, _ = xs.shape
    stop = np.zeros(n, dtype=np.int64)
    final = np.zeros(n)
    for i in range(N):
        m = None if masks is None else np.asarray(masks)[..., i, :]
        stat = detector.step(xs[:, i, :], m)
        hit = (stop == 0) & detector.crossed(stat, b)
        stop[hit] = i + 1
        final[hit] = stat[hit]
        live = stop == 0
        final[live] = stat[live]
        if not live.any():
            break
    return [RunResult(int(s) if s else None, float(f), not s) for s, f in zip(stop, final)]


def trace(detector: BatchDetector, xs, masks=None) -> np.ndarray:
    """Statistic path of a detector over ``xs``; shape ``(N,)`` or ``(n, N)``."""
    xs = np.asarray(xs, dtype=float)
    single = xs.ndim == 2
    if single:
        xs = xs[None]
    out = np.empty(xs.shape[:2])
    for i in range(xs.shape[1]):
        m = None if masks is None else np.asarray(masks)[..., i, :]
        out[:, i] = detector.step(xs[:, i, :], m)
    return out[0] if single else out
