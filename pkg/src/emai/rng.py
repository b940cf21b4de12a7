"""Deterministic, named random-number streams.

Every source of randomness in the package derives from a root seed plus a
tuple of string/int tags, so independent components never share or disturb
each other's streams and whole runs replay bitwise.
"""
from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag: object) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def stream(seed: int, *tags: object) -> np.random.Generator:
    """Return a Generator keyed by (seed, *tags); same key, same stream."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def episode_seed(seed: int, *tags: object) -> int:
    """A stable 63-bit sub-seed for handing to env.reset()."""
    return int(stream(seed, *tags).integers(0, 2**63 - 1))
