"""Named, splittable random streams derived from a single master seed.

Every consumer of randomness asks for a stream by name, e.g.
``substream(seed, "episodes", step)``. Streams with different names are
statistically independent, and the same (seed, names) always yields the
same generator, so components can be varied without perturbing each other.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Return a PCG64 generator for the stream ``seed/names[0]/names[1]/...``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))
