"""Seed handling.

Every random quantity is drawn from a stream derived from one master seed and
an integer key path, so a Monte Carlo run produces the same numbers whether
it is executed serially, in parallel, or alone.
"""

from __future__ import annotations

from typing import Union

import numpy as np

SeedLike = Union[None, int, np.random.Generator, np.random.SeedSequence]

# stage keys
SAMPLE = 0
BUILD = 1
RESAMPLE = 2
POPULATION = 3
MISC = 9


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.default_rng(seed)


def child(seed, *key: int) -> np.random.SeedSequence:
    """Seed sequence for a sub-task, derived without mutating ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(int(k) for k in key))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def child_rng(seed, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child(seed, *key)))
