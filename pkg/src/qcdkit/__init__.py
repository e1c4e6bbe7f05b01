"""Quickest change detection: single- and multi-stream procedures with Monte Carlo calibration."""

from .model import (NEVER, ChangeScenario, ContractError, FixedTheta, GaussianStreamModel,
                    GeometricPrior, ObservationVector, RngStream, SparseRandom, generate_sequence,
                    kl_divergence, llr, load_scenario)
from .registry import DetectorSpec

__version__ = "0.1.0"
