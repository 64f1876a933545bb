"""Seeded counter-based random streams.

Streams come from NumPy's Philox generator keyed through ``SeedSequence``,
which produces the same sequence on every platform for a given seed and
stream key.
"""
import numpy as np


class Rng:
    algorithm = "philox4x64-10"

    def __init__(self, seed=0, stream=()):
        self.seed = int(seed) % 2**64
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, *key):
        """Independent stream derived from this seed; unaffected by draws on ``self``."""
        return Rng(self.seed, self.stream + tuple(key))

    def normal(self, size, scale=1.0, dtype=np.float64):
        out = self._gen.standard_normal(size, dtype=np.float64)
        return (out * scale).astype(dtype, copy=False)

    def uniform(self, size, low=0.0, high=1.0, dtype=np.float64):
        return self._gen.uniform(low, high, size).astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)
