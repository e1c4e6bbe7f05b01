"""Sliding-window plug-in estimators of the post-change mean.

All estimators are functions of the window mean ``xbar`` and the number of
buffered observations ``m``; the array kernels in this module accept any
leading batch shape so the window-limited CuSum can evaluate many windows
and replications at once.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import ContractError

__all__ = [
    "WindowBuffer",
    "ML",
    "JSPlus",
    "HardThreshold",
    "LinearShrinkage",
    "estimator_from_config",
    "ml_estimate",
    "js_plus_estimate",
    "hard_threshold_estimate",
    "linear_shrinkage_estimate",
]


class WindowBuffer:
    """FIFO of the ``capacity`` most recent full observation vectors."""

    def __init__(self, capacity: int, K: int | None = None):
        if capacity < 1:
            raise ContractError("window capacity must be positive")
        self.capacity = int(capacity)
        self.K = K
        self._data: deque = deque(maxlen=self.capacity)

    def push(self, x) -> None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.K is None:
            self.K = x.shape[0]
        elif x.shape[0] != self.K:
            raise ContractError("observation length does not match the buffer")
        self._data.append(x.copy())

    def clear(self) -> None:
        self._data.clear()

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self):
        return iter(self._data)

    def mean(self) -> np.ndarray | None:
        """Componentwise mean, or ``None`` when the buffer is empty."""
        if not self._data:
            return None
        return np.mean(np.stack(self._data), axis=0)


@dataclass(frozen=True)
class ML:
    name = "ml"

    def apply(self, xbar, m):
        return np.asarray(xbar, dtype=float)


@dataclass(frozen=True)
class JSPlus:
    """Positive-part James-Stein shrinkage of the window mean towards 0.

    The mean of ``m`` unit-variance vectors has per-component variance
    ``1/m``, so the shrinkage factor is ``(1 - (K-2) / (m ||xbar||^2))_+``.
    """

    name = "js_plus"

    def apply(self, xbar, m):
        xbar = np.asarray(xbar, dtype=float)
        K = xbar.shape[-1]
        energy = np.asarray(m, dtype=float) * np.einsum("...k,...k->...", xbar, xbar)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = 1.0 - (K - 2) / energy
        factor = np.where(energy > 0, np.clip(factor, 0.0, 1.0), 0.0)
        return factor[..., None] * xbar


@dataclass(frozen=True)
class HardThreshold:
    level: float = 0.0
    name = "hard_threshold"

    def __post_init__(self):
        if not self.level >= 0:
            raise ContractError("hard-threshold level must be nonnegative")

    def apply(self, xbar, m):
        xbar = np.asarray(xbar, dtype=float)
        return np.where(np.abs(xbar) > self.level, xbar, 0.0)


@dataclass(frozen=True)
class LinearShrinkage:
    """``a * xbar + b``; there is no tuning rule for ``a`` and ``b``."""

    a: float = 1.0
    b: tuple | float = 0.0
    name = "linear"

    def apply(self, xbar, m):
        return self.a * np.asarray(xbar, dtype=float) + np.asarray(self.b, dtype=float)


def estimator_from_config(cfg) -> ML | JSPlus | HardThreshold | LinearShrinkage:
    """``"ml"``, ``"js_plus"``, ``{"hard_threshold": level}`` or ``{"linear": {"a":..,"b":..}}``."""
    if isinstance(cfg, (ML, JSPlus, HardThreshold, LinearShrinkage)):
        return cfg
    if isinstance(cfg, str):
        if cfg == "ml":
            return ML()
        if cfg in ("js", "js_plus"):
            return JSPlus()
        raise ContractError(f"unknown estimator {cfg!r}")
    if isinstance(cfg, dict) and len(cfg) == 1:
        (name, arg), = cfg.items()
        if name == "hard_threshold":
            return HardThreshold(float(arg))
        if name == "linear":
            b = arg.get("b", 0.0)
            return LinearShrinkage(float(arg.get("a", 1.0)), tuple(b) if isinstance(b, list) else float(b))
    raise ContractError(f"cannot build an estimator from {cfg!r}")


def _mean_or_fail(buf: WindowBuffer) -> np.ndarray:
    xbar = buf.mean()
    if xbar is None:
        raise ContractError("no estimate: the window buffer is empty")
    return xbar


def ml_estimate(buf: WindowBuffer) -> np.ndarray:
    return _mean_or_fail(buf)


def js_plus_estimate(buf: WindowBuffer) -> np.ndarray:
    return JSPlus().apply(_mean_or_fail(buf), len(buf))


def hard_threshold_estimate(buf: WindowBuffer, level: float) -> np.ndarray:
    return HardThreshold(level).apply(_mean_or_fail(buf), len(buf))


def linear_shrinkage_estimate(buf: WindowBuffer, a: float, b) -> np.ndarray:
    return LinearShrinkage(a, b).apply(_mean_or_fail(buf), len(buf))
