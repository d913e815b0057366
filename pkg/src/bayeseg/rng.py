"""Counter-based random streams built on Philox.

A stream is identified by (seed, stream_id). The same pair always yields the
same sequence of draws, independent of platform, process or thread layout,
and distinct stream_ids give statistically independent sequences. This is
what makes stochastic forward passes replayable and safe to parallelize.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    """One reproducible noise source.

    `counter` tracks how many scalar values have been drawn; it is
    informational (the underlying Philox state advances on its own).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.counter = 0
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        """Derive an independent stream under the same seed."""
        return RngStream(self.seed, stream_id)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.float64)
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return out.astype(dtype, copy=False)

    def uniform(self, low: float, high: float, shape=(), dtype=np.float32) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape)
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return np.asarray(out, dtype=dtype)

    def rademacher(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Independent +/-1 draws with equal probability."""
        out = self._gen.integers(0, 2, size=shape) * 2 - 1
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return np.asarray(out, dtype=dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        out = self._gen.integers(low, high, size=shape)
        self.counter += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += int(n)
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"
