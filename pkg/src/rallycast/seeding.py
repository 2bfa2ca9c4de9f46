"""Named random streams derived from one root seed.

Each component draws from ``stream(seed, name)`` so that, for example, the
fold split does not change when the sampling temperature or the number of
training epochs changes.
"""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))] + [int(e) & 0xFFFFFFFF for e in extra]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
