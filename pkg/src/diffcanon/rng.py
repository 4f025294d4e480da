"""Deterministic, splittable random number generation.

Every stochastic component in the pipeline (data sampling, weight init,
training batches, attacks) draws from its own named sub-stream so that
changing how much randomness one component consumes never perturbs the
others. Streams are counter-based (Philox), so the same seed always
reproduces the same draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """A seeded random stream with deterministic named children.

    `split(label)` derives an independent child stream from the parent's
    key and the label; it does not consume state from the parent, so the
    set of splits performed never changes what the parent draws next.
    """

    def __init__(self, seed: int, _key: int | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = self.seed if _key is None else _key
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def split(self, label: str | int) -> Rng:
        h = hashlib.blake2b(digest_size=16)
        h.update(self._key.to_bytes(16, "little"))
        h.update(str(label).encode("utf-8"))
        child_key = int.from_bytes(h.digest(), "little")
        return Rng(self.seed, _key=child_key)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Draw integers from [low, high) like `numpy.random.Generator.integers`."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self._key:#x})"
