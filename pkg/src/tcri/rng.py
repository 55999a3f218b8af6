"""Counter-based seed splitting.

All randomness derives from one 64-bit seed. A stream is addressed by a tuple
of small integers (purpose, domain, step, ...), so each stream is
reproducible on its own and independent of every other stream.
"""

import numpy as np

# purpose tags for the first element of a stream key
INIT = 0
SHUFFLE = 1
DATA = 2
SPLIT = 3
GAMMA = 4
PERMUTATION = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key)))
