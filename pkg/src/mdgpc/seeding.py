"""Deterministic seed derivation for nested random streams.

Every stochastic component takes an integer seed; independent substreams
(per step, per episode, per batch) are derived through SeedSequence spawn
keys so reruns are bit-identical and streams never alias.
"""

import numpy as np


def derive_seed(seed: int, *key: int) -> int:
    """A stable 64-bit seed for substream `key` of `seed`."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Generator for substream `key` of `seed`."""
    if key:
        return np.random.default_rng(derive_seed(seed, *key))
    return np.random.default_rng(int(seed))
