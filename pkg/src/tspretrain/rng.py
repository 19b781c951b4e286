"""Deterministic random number generation.

Every stochastic choice in the package (initialization, shuffling, masking,
word mapping, synthetic data) flows through :class:`SeededRng`, which wraps
numpy's Philox counter-based bit generator.  Philox sequences depend only on
the 128-bit key, so identical seeds reproduce identical draws across runs
and platforms.
"""

from __future__ import annotations

import numpy as np

_MIX = 0x9E3779B97F4A7C15  # golden-ratio increment, splitmix-style stream separation


class SeededRng:
    """Counter-based generator with cheap, collision-resistant substreams."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: int) -> "SeededRng":
        """Independent substream; same (seed, parent stream, tag) -> same stream."""
        mixed = (self.stream * _MIX + int(tag) + 1) & 0xFFFFFFFFFFFFFFFF
        return SeededRng(self.seed, mixed)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, mean=0.0, std=1.0, size=None):
        return self._gen.normal(mean, std, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        if n <= 0:
            raise ValueError("permutation length must be positive")
        return self._gen.permutation(n)

    def choice_no_replace(self, n: int, k: int) -> np.ndarray:
        """k distinct values from [0, n), uniformly, in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from [0, {n})")
        return self.permutation(n)[:k]

    def shuffle_list(self, items: list) -> list:
        order = self.permutation(len(items)) if items else []
        return [items[i] for i in order]

    def draw(self, kind: str, **spec):
        """Uniform/normal/permutation dispatch used by generic callers."""
        if kind == "uniform":
            return self.uniform(spec.get("low", 0.0), spec.get("high", 1.0), spec.get("size"))
        if kind == "normal":
            return self.normal(spec.get("mean", 0.0), spec.get("std", 1.0), spec.get("size"))
        if kind == "permutation":
            return self.permutation(spec["n"])
        raise ValueError(f"unknown draw kind: {kind!r}")
