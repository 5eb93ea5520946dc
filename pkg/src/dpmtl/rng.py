"""Seeded generators.

All randomness goes through Philox, numpy's counter-based bit generator,
whose output stream is fixed by its key and is identical on every
platform.  ``salt`` integers derive independent streams from one seed.
"""

import numpy as np


def make_rng(seed: int, *salt: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, salt)])
    return np.random.Generator(np.random.Philox(seq))
