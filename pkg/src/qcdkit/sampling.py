"""Sampling-constrained monitoring: which streams to observe at each tick.

Stream indices are 0-based. Every policy picks the action for tick ``n``
from data up to ``n - 1`` only; the batch detectors make this structural by
choosing the mask before they look at the new observation.

Scalar ``*_next`` functions are single-instance references; the
``*Detector`` classes are the vectorized versions used for Monte Carlo.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .base import BatchDetector
from .model import ContractError, RngStream
from .noise import BlockSource

__all__ = [
    "SamplingAction",
    "ActionModel",
    "CyclicScanState",
    "TopLDeltaState",
    "SrRandomizedState",
    "ChernoffState",
    "cyclic_scan_next",
    "top_l_delta_next",
    "sr_randomized_next",
    "action_kl",
    "chernoff_greedy_next",
    "UniformSource",
    "CyclicScanDetector",
    "TopLDeltaDetector",
    "SrRandomizedDetector",
    "ChernoffDetector",
]


@dataclass(frozen=True)
class SamplingAction:
    selected: frozenset

    def __post_init__(self):
        object.__setattr__(self, "selected", frozenset(int(i) for i in self.selected))

    def mask(self, K: int) -> np.ndarray:
        m = np.zeros(K, dtype=bool)
        m[list(self.selected)] = True
        return m

    def __len__(self):
        return len(self.selected)


@dataclass(frozen=True)
class ActionModel:
    """Finite list of subset actions, kept in lexicographic order."""

    K: int
    actions: tuple

    def __post_init__(self):
        acts = tuple(sorted(tuple(sorted(int(i) for i in a)) for a in self.actions))
        if not acts:
            raise ContractError("action list must be nonempty")
        for a in acts:
            if any(i < 0 or i >= self.K for i in a):
                raise ContractError(f"action {a} has an index outside [0, {self.K})")
        object.__setattr__(self, "actions", acts)

    @classmethod
    def subsets(cls, K: int, L: int) -> "ActionModel":
        return cls(K, tuple(itertools.combinations(range(K), L)))

    def indicator(self) -> np.ndarray:
        ind = np.zeros((len(self.actions), self.K))
        for i, a in enumerate(self.actions):
            ind[i, list(a)] = 1.0
        return ind


def action_kl(model: ActionModel | None, a, theta) -> float:
    """Post-change KL of observing the subset ``a``: ``sum_{k in a} theta_k^2 / 2``."""
    theta = np.asarray(theta, dtype=float)
    idx = sorted(a.selected if isinstance(a, SamplingAction) else a)
    if model is not None and tuple(idx) not in model.actions and idx:
        raise ContractError(f"{tuple(idx)} is not an action of the model")
    return 0.5 * float(np.sum(theta[idx] ** 2)) if idx else 0.0


def _stream_llr(theta, x):
    return theta * x - 0.5 * theta * theta


def _top_l(stat, L):
    # stable sort on -stat: ties go to the lowest index
    return np.argsort(-np.asarray(stat), axis=-1, kind="stable")[..., :L]


# --------------------------------------------------------------------------
# scalar references


@dataclass(frozen=True)
class CyclicScanState:
    K: int
    current: int = 0
    w: float = 0.0
    stopped: bool = False

    def action(self) -> SamplingAction:
        return SamplingAction({self.current})


def cyclic_scan_next(state: CyclicScanState, observed_llr: float, b: float, L: int = 1):
    """Advance the scanned stream's CuSum; move on when it drops to 0."""
    if L != 1:
        raise ContractError("the cyclic scanning policy observes exactly one stream (L = 1)")
    w = max(0.0, state.w + float(observed_llr))
    if w > b:
        new = replace(state, w=w, stopped=True)
    elif w == 0.0:
        new = replace(state, w=0.0, current=(state.current + 1) % state.K)
    else:
        new = replace(state, w=w)
    return new, new.action()


@dataclass(frozen=True)
class TopLDeltaState:
    stats: tuple
    action: SamplingAction

    @classmethod
    def initial(cls, K: int, L: int) -> "TopLDeltaState":
        return cls(tuple([0.0] * K), SamplingAction(range(L)))


def top_l_delta_next(state: TopLDeltaState, new_observations, delta: float, L: int):
    """``new_observations``: per-stream llr for the streams in ``state.action``."""
    s = np.array(state.stats, dtype=float)
    K = s.shape[0]
    if delta < 0 or not 1 <= L <= K:
        raise ContractError("need delta >= 0 and 1 <= L <= K")
    ll = np.asarray(new_observations, dtype=float)
    obs = state.action.mask(K)
    s[obs] = np.maximum(0.0, s[obs] + ll[obs])
    s[~obs] += delta
    action = SamplingAction(_top_l(s, L).tolist())
    return TopLDeltaState(tuple(s.tolist()), action), action


@dataclass(frozen=True)
class SrRandomizedState:
    stats: tuple
    action: SamplingAction


def _weighted_without_replacement(weights, L, u):
    # Efraimidis-Spirakis keys log(u) / w: the L largest keys form a
    # successive draw proportional to the weights
    with np.errstate(divide="ignore"):
        keys = np.log(u) / weights
    return _top_l(keys, L)


def sr_randomized_next(state: SrRandomizedState, new_observations, L: int, rng: np.random.Generator):
    """SR update of observed streams, then draw ``L`` streams with prob. ``∝ 1 + R``.

    ``new_observations`` holds per-stream likelihood ratios for the streams in
    ``state.action``.
    """
    r = np.array(state.stats, dtype=float)
    K = r.shape[0]
    obs = state.action.mask(K)
    lr = np.asarray(new_observations, dtype=float)
    r[obs] = (1.0 + r[obs]) * lr[obs]
    idx = _weighted_without_replacement(1.0 + r, L, rng.random(K))
    action = SamplingAction(idx.tolist())
    return SrRandomizedState(tuple(r.tolist()), action), action


@dataclass(frozen=True)
class ChernoffState:
    """Sliding-window ML estimate from sampled data plus exploration schedule.

    ``window`` holds ``(values, mask)`` pairs of the most recent ticks.
    """

    K: int
    L: int
    window_size: int = 50
    explore_every: int = 10
    actions: ActionModel | None = None
    window: tuple = field(default=())

    def estimate(self) -> np.ndarray:
        if not self.window:
            return np.zeros(self.K)
        vals = np.array([v for v, _ in self.window])
        mask = np.array([m for _, m in self.window])
        cnt = mask.sum(axis=0)
        tot = np.where(mask, vals, 0.0).sum(axis=0)
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)

    def observe(self, values, mask) -> "ChernoffState":
        win = (self.window + ((np.asarray(values, float), np.asarray(mask, bool)),))[-self.window_size:]
        return replace(self, window=win)


def chernoff_greedy_next(state: ChernoffState, L: int, tick: int, rng: np.random.Generator):
    """Greedy KL action at ordinary ticks, uniform action every ``explore_every`` ticks."""
    if L != state.L:
        raise ContractError("L does not match the policy state")
    model = state.actions
    if tick % state.explore_every == 0:
        if model is None:
            idx = np.argsort(rng.random(state.K), kind="stable")[:L]
        else:
            idx = model.actions[int(rng.random() * len(model.actions))]
        return state, SamplingAction(idx)
    th = state.estimate()
    if model is None:
        return state, SamplingAction(_top_l(th * th, L).tolist())
    kls = [action_kl(model, a, th) for a in model.actions]
    return state, SamplingAction(model.actions[int(np.argmax(kls))])


# --------------------------------------------------------------------------
# vectorized detectors


class UniformSource(BlockSource):
    """Per-replication blocks of uniforms drawn from the ``policy`` streams."""

    def __init__(self, streams: list[RngStream], K: int, block: int = 64):
        super().__init__(streams, K, purpose="policy", kind="uniform", block=block)


def _policy_source(n, K, streams, seed):
    if streams is None:
        streams = [RngStream(seed, i) for i in range(n)]
    if len(streams) != n:
        raise ContractError("need one random stream per row")
    return UniformSource(streams, K)


class _PolicyDetector(BatchDetector):
    def __init__(self, n, K, theta):
        super().__init__(n, K)
        th = np.broadcast_to(np.asarray(theta, dtype=float), (K,)).copy()
        self.theta = th
        self.last_action = np.zeros((self.n, K), dtype=bool)


class CyclicScanDetector(_PolicyDetector):
    """Scan one stream at a time until its CuSum returns to 0 or alarms."""

    _fields = ("current", "w", "last_action")

    def __init__(self, n: int, K: int, theta=0.5):
        super().__init__(n, K, theta)
        self.current = np.zeros(self.n, dtype=np.int64)
        self.w = np.zeros(self.n)

    def _step(self, x, mask):
        rows = np.arange(self.n)
        self.last_action = np.zeros((self.n, self.K), dtype=bool)
        self.last_action[rows, self.current] = True
        th = self.theta[self.current]
        self.w = np.maximum(0.0, self.w + th * x[rows, self.current] - 0.5 * th * th)
        stat = self.w.copy()
        move = self.w == 0.0
        self.current = np.where(move, (self.current + 1) % self.K, self.current)
        return stat

    @property
    def statistic(self):
        return self.w.copy()


class TopLDeltaDetector(_PolicyDetector):
    """Observe the ``L`` largest local CuSums; unobserved ones gain ``delta``.

    The alarm statistic is the largest local CuSum among the streams observed
    at the current tick, so the exploration bonus alone never raises an alarm.
    """

    _fields = ("s", "last_action", "stat")

    def __init__(self, n: int, K: int, L: int, delta: float = 0.01, theta=0.5):
        super().__init__(n, K, theta)
        if delta < 0 or not 1 <= L <= K:
            raise ContractError("need delta >= 0 and 1 <= L <= K")
        self.L, self.delta = int(L), float(delta)
        self.s = np.zeros((self.n, K))
        self.stat = np.zeros(self.n)

    def _step(self, x, mask):
        rows = np.arange(self.n)[:, None]
        obs = np.zeros((self.n, self.K), dtype=bool)
        obs[rows, _top_l(self.s, self.L)] = True
        self.last_action = obs
        self.s = np.where(obs, np.maximum(0.0, self.s + _stream_llr(self.theta, x)), self.s + self.delta)
        self.stat = np.where(obs, self.s, -np.inf).max(axis=1)
        return self.stat.copy()

    @property
    def statistic(self):
        return self.stat.copy()


class SrRandomizedDetector(_PolicyDetector):
    """Observe ``L`` streams drawn with probability ``∝ 1 + R_k`` (per-stream SR)."""

    _fields = ("r", "last_action", "stat", "_rows")

    def __init__(self, n: int, K: int, L: int, theta=0.5, streams=None, seed: int = 0):
        super().__init__(n, K, theta)
        if not 1 <= L <= K:
            raise ContractError("need 1 <= L <= K")
        self.L = int(L)
        self.r = np.zeros((self.n, K))
        self.stat = np.zeros(self.n)
        self._rows = np.arange(self.n)
        self._source = _policy_source(self.n, K, streams, seed)

    def _step(self, x, mask):
        u = self._source.draw(self._rows)
        obs = np.zeros((self.n, self.K), dtype=bool)
        obs[np.arange(self.n)[:, None], _weighted_without_replacement(1.0 + self.r, self.L, u)] = True
        self.last_action = obs
        lr = np.exp(np.minimum(_stream_llr(self.theta, x), 700.0))
        self.r = np.where(obs, (1.0 + self.r) * lr, self.r)
        self.stat = np.where(obs, self.r, -np.inf).max(axis=1)
        return self.stat.copy()

    @property
    def statistic(self):
        return self.stat.copy()


class ChernoffDetector(_PolicyDetector):
    """KL-greedy sensing with deterministic exploration and a plug-in CuSum.

    ``theta_hat`` is the per-stream mean of sampled values in the last
    ``window`` ticks; the alarm statistic is
    ``W = max(0, W) + sum_{k observed} (theta_hat_k x_k - theta_hat_k^2 / 2)``.
    """

    _fields = ("vals", "obs", "head", "w", "last_action", "_rows")

    def __init__(self, n: int, K: int, L: int, window: int = 50, explore_every: int = 10,
                 actions: ActionModel | None = None, streams=None, seed: int = 0):
        super().__init__(n, K, 0.0)
        if not 1 <= L <= K or window < 1 or explore_every < 1:
            raise ContractError("invalid Chernoff policy parameters")
        self.L, self.window, self.explore_every = int(L), int(window), int(explore_every)
        self.actions = actions
        self._ind = None if actions is None else actions.indicator()
        self.vals = np.zeros((self.n, window, K))
        self.obs = np.zeros((self.n, window, K), dtype=bool)
        self.head = np.full(self.n, -1, dtype=np.int64)
        self.w = np.zeros(self.n)
        self._rows = np.arange(self.n)
        self._source = _policy_source(self.n, K, streams, seed)

    def estimates(self) -> np.ndarray:
        cnt = self.obs.sum(axis=1)
        tot = np.where(self.obs, self.vals, 0.0).sum(axis=1)
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)

    def _choose(self, th, u, tick):
        n, K = th.shape
        act = np.zeros((n, K), dtype=bool)
        rows = np.arange(n)[:, None]
        explore = (tick % self.explore_every) == 0
        if self._ind is None:
            greedy = _top_l(th * th, self.L)
            rand = np.argsort(u, axis=1, kind="stable")[:, :self.L]
            act[rows, np.where(explore[:, None], rand, greedy)] = True
        else:
            M = self._ind.shape[0]
            greedy = np.argmax(0.5 * (th * th) @ self._ind.T, axis=1)
            rand = np.minimum((u[:, 0] * M).astype(np.int64), M - 1)
            act = self._ind[np.where(explore, rand, greedy)].astype(bool)
        return act

    def _step(self, x, mask):
        th = self.estimates()
        u = self._source.draw(self._rows)
        obs = self._choose(th, u, self.t + 1)
        self.last_action = obs
        ll = np.where(obs, th * x - 0.5 * th * th, 0.0).sum(axis=1)
        self.w = np.maximum(self.w, 0.0) + ll
        rows = np.arange(self.n)
        self.head = (self.head + 1) % self.window
        self.vals[rows, self.head] = np.where(obs, x, 0.0)
        self.obs[rows, self.head] = obs
        return self.w.copy()

    @property
    def statistic(self):
        return self.w.copy()
