"""Seeded random streams.

Every stream is derived from a master seed plus an integer key path through
``numpy.random.SeedSequence``, so streams for different (variant, run, step,
phase) tuples are independent and do not depend on evaluation order.
"""

from __future__ import annotations

import zlib

import numpy as np


def as_generator(rng=None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(rng))
    return np.random.default_rng(rng)


def key_of(label) -> int:
    """Stable integer for a string label (crc32) or pass-through for ints."""
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode())


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for ``seed`` and a path of int or string keys."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key_of(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
