"""Seeded randomness, split into named sub-streams.

Every run derives all randomness from one user seed.  Each consumer
(search, init, augment, droppath, synthetic) gets its own generator
keyed by (seed, crc32(name)), so adding draws to one component never
shifts the streams of the others.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAM_NAMES = ("search", "init", "augment", "droppath", "synthetic")


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("ascii"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
