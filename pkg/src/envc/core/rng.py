"""Counter-based, splittable random streams (Philox)."""

from __future__ import annotations

import numpy as np


def generator(seed: int, *path: int) -> np.random.Generator:
    """Independent Philox stream addressed by ``seed`` and an integer path.

    The same (seed, path) always yields the same stream, regardless of how
    many other streams were drawn before it.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
