"""Seeded random streams with deterministic splitting."""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    """A numpy ``Generator`` plus the seed lineage needed to split it.

    ``split(key)`` derives an independent child stream from the parent seed
    and the key alone, so children do not depend on how much the parent has
    already been consumed.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_path)))

    def split(self, key: str | int) -> "Rng":
        k = key if isinstance(key, int) else zlib.crc32(key.encode())
        return Rng(self.seed, self._path + (k,))

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"
