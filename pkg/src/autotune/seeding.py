"""Seed splitting.

Every random stream is derived from one top-level seed plus a fixed tuple of
integer keys, so any stage can be reproduced in isolation::

    rng_for(seed, INIT)                  # model initialisation
    rng_for(seed, BATCH, step)           # training batch at ``step``
    rng_for(seed, EVAL, song_index)      # fixed evaluation assignment
    rng_for(seed, SPLIT)                 # train/validation/test shuffles
"""
from __future__ import annotations

import numpy as np

INIT = 1
BATCH = 2
EVAL = 3
SPLIT = 4
SONG_ORDER = 5
GRADCHECK = 6


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
