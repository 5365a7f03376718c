"""Deterministic derivation of independent RNG streams from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def seed_seq(seed: int, *tags: str) -> np.random.SeedSequence:
    """A SeedSequence keyed by (seed, tags); stable across runs and platforms."""
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(t.encode()) for t in tags]
    return np.random.SeedSequence(entropy)


def rng_for(seed: int, *tags: str) -> np.random.Generator:
    return np.random.default_rng(seed_seq(seed, *tags))
