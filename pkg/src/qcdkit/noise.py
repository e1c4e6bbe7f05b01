"""Per-replication random blocks for vectorized simulation.

Each row owns one generator; draws are buffered in blocks so the per-tick
cost is a single fancy-indexing read. Block refills consume the generator in
order, so the values a row sees do not depend on the block size or on which
other rows are active.
"""

from __future__ import annotations

import numpy as np

from .model import RngStream


class BlockSource:
    def __init__(self, streams: list[RngStream], K: int, purpose: str = "noise",
                 kind: str = "normal", block: int = 64):
        if kind not in ("normal", "uniform"):
            raise ValueError(f"unknown draw kind {kind!r}")
        self.K = int(K)
        self.block = int(block)
        self.kind = kind
        self._gens = [s.generator(purpose) for s in streams]
        self._buf = np.empty((len(streams), self.block, self.K))
        self._off = np.full(len(streams), self.block, dtype=np.int64)

    def __len__(self):
        return len(self._gens)

    def _refill(self, r):
        g = self._gens[r]
        shape = (self.block, self.K)
        self._buf[r] = g.standard_normal(shape) if self.kind == "normal" else g.random(shape)
        self._off[r] = 0

    def draw(self, rows) -> np.ndarray:
        """Next ``K``-vector for each row in ``rows``; shape ``(len(rows), K)``."""
        rows = np.asarray(rows, dtype=np.int64)
        for r in rows[self._off[rows] >= self.block]:
            self._refill(r)
        out = self._buf[rows, self._off[rows]]
        self._off[rows] += 1
        return out


def replication_streams(seed: int, indices, phase: int = 0) -> list[RngStream]:
    return [RngStream(seed, int(i), phase) for i in indices]
