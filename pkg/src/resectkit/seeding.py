"""Deterministic RNG streams.

Every stochastic component draws from a PCG64 generator keyed by a master
seed plus a structured spawn key (channel ids, participant/trial indices),
so independent noise channels can be re-drawn identically regardless of
what other channels consumed.
"""

from __future__ import annotations

import numpy as np

# channel ids
FIDUCIAL = 1
LATERAL = 2
JITTER = 3
PAUSE = 4
DRIFT = 5
ORDER = 6
PARTICIPANT = 7
PLACEMENT = 8

__all__ = ["rng_for", "FIDUCIAL", "LATERAL", "JITTER", "PAUSE", "DRIFT",
           "ORDER", "PARTICIPANT", "PLACEMENT"]


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Generator for the given master seed and channel key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
