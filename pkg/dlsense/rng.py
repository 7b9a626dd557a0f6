"""Seeded, splittable random streams.

Every random draw in dlsense comes from an ``RngStream``. A stream is a
64-bit seed plus a key path; children are addressed by integer keys, so
frame ``i`` of split ``s`` always gets the same substream no matter which
worker synthesizes it or in what order.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

SEED_MASK = (1 << 64) - 1


class RngStream:
    """Wrapper around ``numpy.random.SeedSequence`` with keyed children."""

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        self._seed = int(seed) & SEED_MASK
        self._key = tuple(int(k) for k in key)
        self._counter = 0

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def key(self) -> Tuple[int, ...]:
        return self._key

    def child(self, *keys: int) -> 'RngStream':
        """Substream addressed by ``keys`` below this stream."""
        return RngStream(self._seed, self._key + tuple(keys))

    def fork(self) -> 'RngStream':
        """Next sequential child; the n-th fork of equal streams is equal."""
        child = self.child(self._counter)
        self._counter += 1
        return child

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self._seed, spawn_key=self._key)
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f'RngStream(seed={self._seed}, key={self._key})'
