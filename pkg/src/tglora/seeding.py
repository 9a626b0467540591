"""Named, order-independent random streams.

Every stream is a PCG64 generator seeded from ``(seed, *keys)`` through
``SeedSequence``, so the values drawn for one parameter never depend on how
many other parameters were created before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(key) -> list[int]:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed: int, *keys) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        entropy.extend(_key_words(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
