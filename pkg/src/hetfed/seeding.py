"""Deterministic seed derivation for every random stream in a run.

All randomness flows through `mix_seed`, a splitmix64 chain over integer
tags, so that any (master_seed, repeat, client, round) combination maps to
a stable 64-bit stream seed independent of execution order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream tags. Strategy-independent streams (init, sampling, profiles,
# data, partition) must stay strategy-independent so that different
# algorithms see identical inputs under a shared scenario.
TAG_INIT = 1
TAG_CLIENT = 2
TAG_SAMPLE = 3
TAG_PROFILES = 4
TAG_DATA = 5
TAG_PARTITION = 6
TAG_SERVER = 7
TAG_REPEAT = 8

# Lanes separate independent draws within one client-round stream.
LANE_BATCH = 0
LANE_RATE = 1
LANE_DISTILL = 2


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed via a splitmix64 chain."""
    h = 0
    for part in parts:
        h = _splitmix64(h ^ (int(part) & _MASK64))
    return h


def rng_from(*parts: int) -> np.random.Generator:
    """A numpy Generator seeded from the mixed parts."""
    return np.random.default_rng(mix_seed(*parts))
