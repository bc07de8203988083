"""Seed handling: one root seed, named deterministic sub-streams.

Every source of randomness in the project (simulator, weight init, droppath,
policy, batch shuffling) draws from its own stream so that adding noise in one
place never perturbs another. Streams are derived from (seed, name) only, so
the same pair always yields the same sequence regardless of creation order.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator tied to (seed, name)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFF, spawn_key=(key,)))
