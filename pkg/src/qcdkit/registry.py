"""Named detector specifications: ``(kind, K, params)`` -> batch detector.

A :class:`DetectorSpec` is hashable and has a canonical JSON key, so it can
be used for caching calibrated thresholds. It also carries the threshold
coordinate used by the calibration search (``linear``, ``log`` for the SR
family, ``logit`` for posterior probabilities) and an initial bracket.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ContractError, RngStream
from .multi import (GlrBankDetector, GlrWindowDetector, MixtureDetector, SumCusumDetector,
                    ThetaBank, WlBankDetector, WlCusumDetector, XsDetector)
from .sampling import (ActionModel, ChernoffDetector, CyclicScanDetector, SrRandomizedDetector,
                       TopLDeltaDetector)
from .single import CusumDetector, ExpCusumDetector, ShiryaevDetector, SrDetector

__all__ = ["DetectorSpec", "KINDS", "to_scale", "from_scale"]


def _bank(K, params):
    if "binary" in params:
        return ThetaBank.binary(K, float(params["binary"]))
    thetas = np.asarray(params["thetas"], dtype=float)
    if "weights" in params:
        return ThetaBank(thetas, np.asarray(params["weights"], dtype=float))
    return ThetaBank.uniform(thetas)


def _theta(params):
    return params.get("theta", 0.5)


def _actions(K, params):
    acts = params.get("actions")
    return None if acts is None else ActionModel(K, tuple(tuple(int(i) for i in a) for a in acts))


# kind -> (factory(n, K, params, streams), allowed parameter names)
KINDS = {
    "cusum": (lambda n, K, p, s: CusumDetector(n, K, _theta(p)), {"theta"}),
    "sr": (lambda n, K, p, s: SrDetector(n, K, _theta(p)), {"theta"}),
    "shiryaev": (lambda n, K, p, s: ShiryaevDetector(n, K, _theta(p), p.get("rho", 0.01)), {"theta", "rho"}),
    "exp_cusum": (lambda n, K, p, s: ExpCusumDetector(n, K, _theta(p), p.get("beta", 1.0)), {"theta", "beta"}),
    "glr_bank": (lambda n, K, p, s: GlrBankDetector(n, _bank(K, p)), {"thetas", "weights", "binary"}),
    "mixture": (lambda n, K, p, s: MixtureDetector(n, _bank(K, p)), {"thetas", "weights", "binary"}),
    "sum_cusum": (lambda n, K, p, s: SumCusumDetector(n, K, _theta(p), p.get("design_value", 0.5)),
                  {"theta", "design_value"}),
    "xs": (lambda n, K, p, s: XsDetector(n, K, p.get("p", 1.0 / math.sqrt(K)), p.get("window", 200)),
           {"p", "window"}),
    "glr": (lambda n, K, p, s: GlrWindowDetector(n, K, p.get("window", 200)), {"window"}),
    "wl_cusum": (lambda n, K, p, s: WlCusumDetector(n, K, p.get("window", 50), p.get("estimator", "ml"),
                                                    p.get("flush_on_reset", False)),
                 {"window", "estimator", "flush_on_reset"}),
    "wl_bank": (lambda n, K, p, s: WlBankDetector(n, K, tuple(p.get("windows", (30, 40, 50, 60, 70, 80))),
                                                  p.get("estimator", "ml"), p.get("flush_on_reset", False)),
                {"windows", "estimator", "flush_on_reset"}),
    "cyclic": (lambda n, K, p, s: CyclicScanDetector(n, K, _theta(p)), {"theta"}),
    "top_l": (lambda n, K, p, s: TopLDeltaDetector(n, K, p.get("L", 1), p.get("delta", 0.01), _theta(p)),
              {"L", "delta", "theta"}),
    "sr_random": (lambda n, K, p, s: SrRandomizedDetector(n, K, p.get("L", 1), _theta(p), streams=s),
                  {"L", "theta"}),
    "chernoff": (lambda n, K, p, s: ChernoffDetector(n, K, p.get("L", 1), p.get("window", 50),
                                                     p.get("explore_every", 10), _actions(K, p), streams=s),
                 {"L", "window", "explore_every", "actions"}),
}

_LOG_KINDS = {"sr", "sr_random"}
_LOGIT_KINDS = {"shiryaev"}


def _freeze(value):
    if isinstance(value, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple, np.ndarray)):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def _thaw(value):
    if isinstance(value, tuple) and value and all(isinstance(v, tuple) and len(v) == 2
                                                  and isinstance(v[0], str) for v in value):
        return {k: _thaw(v) for k, v in value}
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


@dataclass(frozen=True)
class DetectorSpec:
    kind: str
    K: int = 1
    params: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown detector kind {self.kind!r}")
        if self.K < 1:
            raise ContractError("K must be positive")
        params = self.params
        if isinstance(params, dict):
            params = _freeze(params)
        object.__setattr__(self, "params", params)
        unknown = set(self.param_dict) - KINDS[self.kind][1]
        if unknown:
            raise ContractError(f"unknown parameters for {self.kind}: {sorted(unknown)}")

    @classmethod
    def make(cls, kind: str, K: int = 1, **params) -> "DetectorSpec":
        return cls(kind, K, params)

    @property
    def param_dict(self) -> dict:
        return _thaw(self.params) if self.params else {}

    @property
    def key(self) -> str:
        return json.dumps({"kind": self.kind, "K": self.K, "params": self.param_dict},
                          sort_keys=True, separators=(",", ":"))

    @property
    def strict(self) -> bool:
        return self.build(1).strict

    def build(self, n: int, streams: list[RngStream] | None = None):
        factory, _ = KINDS[self.kind]
        return factory(n, self.K, self.param_dict, streams)

    @property
    def scale(self) -> str:
        if self.kind in _LOG_KINDS:
            return "log"
        if self.kind in _LOGIT_KINDS:
            return "logit"
        return "linear"

    def bracket(self, gamma: float) -> tuple[float, float]:
        """Initial threshold bracket for target ARL ``gamma``, in threshold units."""
        lg = math.log(gamma)
        if self.kind in ("cusum", "exp_cusum", "glr_bank", "mixture"):
            return lg - 2.0, lg + 2.0
        if self.kind in _LOG_KINDS:
            return gamma / 20.0, gamma
        if self.kind in _LOGIT_KINDS:
            c = math.log(self.param_dict.get("rho", 0.01) * gamma)
            return from_scale(c - 3.0, "logit"), from_scale(c + 3.0, "logit")
        return 0.0, lg


def to_scale(b: float, scale: str) -> float:
    if scale == "linear":
        return float(b)
    if scale == "log":
        return math.log(b) if b > 0 else -math.inf
    if b <= 0:
        return -math.inf
    if b >= 1:
        return math.inf
    return math.log(b / (1.0 - b))


def from_scale(u: float, scale: str) -> float:
    if scale == "linear":
        return float(u)
    if scale == "log":
        return math.exp(u)
    return 1.0 / (1.0 + math.exp(-u))
