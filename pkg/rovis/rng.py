"""Explicit, splittable random streams.

Every consumer of randomness receives an Rng. There is no module-level
generator anywhere in the package.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np


class Rng:
    """A Philox stream addressed by (seed, path).

    Two Rng objects with the same seed and path produce the same draws on
    every platform. split() hands out fresh child paths; fold() derives a
    child from an explicit key without touching this stream.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        seed = int(seed)
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = seed
        self.path: Tuple[int, ...] = tuple(int(k) for k in path)
        sequence = np.random.SeedSequence(seed, spawn_key=self.path)
        self._generator = np.random.Generator(np.random.Philox(sequence))
        self._spawned = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    @property
    def state(self) -> dict:
        return self._generator.bit_generator.state

    def fold(self, key: int) -> "Rng":
        return Rng(self.seed, self.path + (int(key),))

    def split(self, n: int = 2) -> List["Rng"]:
        children = [Rng(self.seed, self.path + (1_000_000 + self._spawned + i,)) for i in range(n)]
        self._spawned += n
        return children

    def random(self, size=None):
        return self._generator.random(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        value = self._generator.integers(low, high, size)
        return int(value) if size is None else value

    def bernoulli(self, p: float, size=None):
        return self._generator.random(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace)
