"""Gaussian multi-stream observation model, change scenarios and random streams.

Pre-change data are ``N(0, I_K)``; after the change stream ``k`` has mean
``theta[k]`` (in units of the noise standard deviation). Correlated inputs
must be whitened by the caller.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "NEVER",
    "ContractError",
    "GaussianStreamModel",
    "ObservationVector",
    "FixedTheta",
    "SparseRandom",
    "GeometricPrior",
    "ChangeScenario",
    "RngStream",
    "as_theta",
    "llr",
    "kl_divergence",
    "sparse_random_theta",
    "geometric_change_point",
    "generate_sequence",
    "load_scenario",
]

#: Change point of a stream that never changes. IEEE infinity, so ``T < NEVER``
#: and ``n >= NEVER`` behave as they should without special cases.
NEVER = math.inf


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


def as_theta(theta, K: int | None = None) -> np.ndarray:
    """Coerce ``theta`` to a 1-d float array, optionally checking its length."""
    arr = np.atleast_1d(np.asarray(theta, dtype=float))
    if arr.ndim != 1:
        raise ContractError(f"theta must be a vector, got shape {arr.shape}")
    if K is not None and arr.shape[0] != K:
        raise ContractError(f"theta has length {arr.shape[0]}, model has K={K}")
    return arr


@dataclass(frozen=True)
class GaussianStreamModel:
    """K independent unit-variance Gaussian streams with zero pre-change mean."""

    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ContractError(f"K must be a positive integer, got {self.K!r}")

    def llr(self, x, theta, mask=None) -> float:
        return llr(self, x, theta, mask)

    def sample(self, rng: np.random.Generator, theta=None, size: int = 1) -> np.ndarray:
        """Draw ``size`` observation vectors with mean ``theta`` (default 0)."""
        z = rng.standard_normal((size, self.K))
        if theta is not None:
            z += as_theta(theta, self.K)
        return z


@dataclass(frozen=True)
class ObservationVector:
    """One tick of data. Entries where ``mask`` is False were not sampled."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", values)
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones(values.shape[0], dtype=bool))
        else:
            mask = np.atleast_1d(np.asarray(self.mask, dtype=bool))
            if mask.shape != values.shape:
                raise ContractError("mask and values must have the same length")
            object.__setattr__(self, "mask", mask)

    @property
    def K(self) -> int:
        return self.values.shape[0]


def llr(model: GaussianStreamModel, x, theta, mask=None) -> float:
    """Log-likelihood ratio ``log f(x | theta) / f(x | 0)`` over sampled streams.

    ``x`` may be an :class:`ObservationVector` (its mask is used) or a plain
    vector, in which case ``mask`` defaults to all streams.
    """
    if isinstance(x, ObservationVector):
        values, m = x.values, x.mask if mask is None else np.asarray(mask, dtype=bool)
    else:
        values = np.atleast_1d(np.asarray(x, dtype=float))
        m = np.ones(values.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    theta = as_theta(theta, model.K)
    if values.shape[0] != model.K or m.shape[0] != model.K:
        raise ContractError(f"observation has length {values.shape[0]}, model has K={model.K}")
    # masked-out entries are never read: they may hold NaN or garbage
    th = theta[m]
    return float(th @ values[m] - 0.5 * (th @ th))


def kl_divergence(theta) -> float:
    """KL divergence of ``N(theta, I)`` from ``N(0, I)``, i.e. ``||theta||^2 / 2``."""
    th = as_theta(theta)
    return 0.5 * float(th @ th)


@dataclass(frozen=True)
class FixedTheta:
    theta: tuple


@dataclass(frozen=True)
class SparseRandom:
    """Random post-change vector with ``L`` affected streams and KL ``kl``.

    The first ``L`` components are drawn ``N(0.5, 1)`` and the vector is then
    rescaled so that ``||theta||^2 / 2 == kl``.
    """

    L: int
    kl: float = 0.5


@dataclass(frozen=True)
class GeometricPrior:
    """Change point with ``P(nu = n) = rho (1 - rho)^n`` for ``n = 0, 1, ...``.

    ``nu = 0`` and ``nu = 1`` both mean the very first observation is already
    post-change, so realizations are clipped to 1 for data generation.
    """

    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ContractError(f"rho must lie in (0, 1], got {self.rho}")


def sparse_random_theta(K: int, L: int, kl: float, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= L <= K:
        raise ContractError(f"need 1 <= L <= K, got L={L}, K={K}")
    if kl < 0:
        raise ContractError("target KL must be nonnegative")
    # all K normals are drawn so the stream consumption does not depend on L
    xi = rng.normal(0.5, 1.0, size=K)
    xi[L:] = 0.0
    norm = math.sqrt(float(xi @ xi))
    return xi * (math.sqrt(2.0 * kl) / norm)


def geometric_change_point(rho: float, rng: np.random.Generator) -> int:
    """Draw from :class:`GeometricPrior` (support starts at 0)."""
    return int(rng.geometric(rho)) - 1


ChangeSpec = Union[float, Sequence[float], GeometricPrior]


@dataclass(frozen=True)
class ChangeScenario:
    """Where and how the change happens.

    ``change_points`` is a single change point shared by all streams, a
    per-stream sequence, or a :class:`GeometricPrior` drawn independently per
    stream. ``rule`` is :class:`FixedTheta` or :class:`SparseRandom`.
    """

    K: int
    change_points: ChangeSpec = NEVER
    rule: FixedTheta | SparseRandom = field(default=None)

    def __post_init__(self):
        rule = self.rule
        if rule is None:
            rule = FixedTheta(tuple([0.0] * self.K))
        elif not isinstance(rule, (FixedTheta, SparseRandom)):
            rule = FixedTheta(tuple(as_theta(rule, self.K).tolist()))
        if isinstance(rule, FixedTheta):
            as_theta(rule.theta, self.K)
        elif not 1 <= rule.L <= self.K:
            raise ContractError(f"sparse rule needs 1 <= L <= K, got L={rule.L}")
        object.__setattr__(self, "rule", rule)
        cp = self.change_points
        if not isinstance(cp, GeometricPrior):
            arr = np.atleast_1d(np.asarray(cp, dtype=float))
            if arr.shape[0] not in (1, self.K):
                raise ContractError("change_points must be scalar or per-stream")
            if np.any(arr < 1) or np.any((arr != np.floor(arr)) & np.isfinite(arr)):
                raise ContractError("change points must be positive integers or NEVER")

    @classmethod
    def fixed(cls, theta, nu: ChangeSpec = NEVER) -> "ChangeScenario":
        theta = as_theta(theta)
        return cls(K=theta.shape[0], change_points=nu, rule=FixedTheta(tuple(theta.tolist())))

    def draw_theta(self, rng: "RngStream") -> np.ndarray:
        if isinstance(self.rule, FixedTheta):
            return np.array(self.rule.theta, dtype=float)
        return sparse_random_theta(self.K, self.rule.L, self.rule.kl, rng.generator("theta"))

    def draw_change_points(self, rng: "RngStream") -> np.ndarray:
        """Per-stream change points as floats (``NEVER`` for no change)."""
        cp = self.change_points
        if isinstance(cp, GeometricPrior):
            g = rng.generator("change")
            return np.maximum(g.geometric(cp.rho, size=self.K) - 1, 1).astype(float)
        arr = np.atleast_1d(np.asarray(cp, dtype=float))
        return np.broadcast_to(arr, (self.K,)).copy()

    def realize(self, rng: "RngStream") -> tuple[np.ndarray, np.ndarray]:
        return self.draw_theta(rng), self.draw_change_points(rng)


_PURPOSES = {"noise": 0, "theta": 1, "change": 2, "policy": 3}


@dataclass(frozen=True)
class RngStream:
    """Random streams of one Monte Carlo replication.

    Every ``(seed, replication_index, phase, purpose)`` tuple maps to an
    independent counter-based Philox stream, so results do not depend on the
    order in which replications are executed.
    """

    seed: int
    replication_index: int
    phase: int = 0

    def generator(self, purpose: str = "noise") -> np.random.Generator:
        try:
            key = _PURPOSES[purpose]
        except KeyError:
            raise ContractError(f"unknown random purpose {purpose!r}") from None
        ss = np.random.SeedSequence(
            int(self.seed), spawn_key=(int(self.phase), int(self.replication_index), key)
        )
        return np.random.Generator(np.random.Philox(ss))


def generate_sequence(model: GaussianStreamModel, scenario: ChangeScenario, rng: RngStream,
                      horizon: int, theta=None) -> np.ndarray:
    """Full observations for ticks ``1..horizon`` as a ``(horizon, K)`` array.

    Row ``n - 1`` holds the observation at tick ``n``. ``theta`` overrides the
    scenario draw (useful when the caller already realized it).
    """
    if horizon < 1:
        raise ContractError("horizon must be at least 1")
    if scenario.K != model.K:
        raise ContractError("scenario and model disagree on K")
    if theta is None:
        theta = scenario.draw_theta(rng)
    nu = scenario.draw_change_points(rng)
    x = rng.generator("noise").standard_normal((horizon, model.K))
    ticks = np.arange(1, horizon + 1, dtype=float)[:, None]
    x += np.where(ticks >= nu[None, :], as_theta(theta, model.K)[None, :], 0.0)
    return x


_SCENARIO_KEYS = {"K", "change_point", "theta", "seed"}


def load_scenario(source) -> tuple[GaussianStreamModel, ChangeScenario, int]:
    """Build a model, scenario and seed from a JSON document or mapping.

    Recognized keys: ``K``; ``change_point`` (integer, list, ``"never"`` or
    ``{"geometric": rho}``); ``theta`` (list, scalar, or
    ``{"sparse": L, "kl": value}``); ``seed``.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "read"):
        if hasattr(source, "read"):
            doc = json.load(source)
        else:
            with open(source) as fh:
                doc = json.load(fh)
    else:
        doc = dict(source)
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise ContractError(f"unknown scenario keys: {sorted(unknown)}")
    K = int(doc["K"])
    cp = doc.get("change_point", "never")
    if cp == "never" or cp is None:
        cp = NEVER
    elif isinstance(cp, dict):
        cp = GeometricPrior(float(cp["geometric"]))
    elif isinstance(cp, list):
        cp = tuple(NEVER if c == "never" else float(c) for c in cp)
    th = doc.get("theta", 0.0)
    if isinstance(th, dict):
        rule = SparseRandom(int(th["sparse"]), float(th.get("kl", 0.5)))
    else:
        rule = FixedTheta(tuple(np.broadcast_to(as_theta(th), (K,)).tolist()))
    return GaussianStreamModel(K), ChangeScenario(K, cp, rule), int(doc.get("seed", 0))
