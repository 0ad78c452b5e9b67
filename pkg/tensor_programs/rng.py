"""
Counter-based random streams.

A stream is addressed by a root seed and a key of non-negative integers, so
the numbers drawn for a given purpose never depend on what was drawn before
or on which thread asks for them.
"""
from typing import List, Tuple

import numpy as np


def stream(root_seed: int, *key: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(root_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(root_seed: int, *key: int) -> int:
    sequence = np.random.SeedSequence(root_seed, spawn_key=tuple(int(k) for k in key))
    return int(sequence.generate_state(1, np.uint32)[0])


class SeededStreams:
    """
    Root seed plus a key prefix. ``fork`` extends the prefix for sub-tasks.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seeds must be non-negative")
        self._seed = int(seed)
        self._key = tuple(int(k) for k in key)

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def key(self) -> Tuple[int, ...]:
        return self._key

    def fork(self, *key: int) -> "SeededStreams":
        return SeededStreams(self._seed, self._key + tuple(key))

    def generator(self, *key: int) -> np.random.Generator:
        return stream(self._seed, *self._key, *key)

    def generators(self, count: int, *key: int) -> List[np.random.Generator]:
        """
        The streams ``key + (i,)`` for ``i < count``, spawned from one seed
        sequence.
        """
        parent = np.random.SeedSequence(self._seed, spawn_key=self._key + tuple(int(k) for k in key))
        return [np.random.Generator(np.random.Philox(child)) for child in parent.spawn(count)]

    def derived_seed(self, *key: int) -> int:
        return derive_seed(self._seed, *self._key, *key)
