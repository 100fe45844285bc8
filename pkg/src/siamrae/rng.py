"""Seeded random streams.

Every random draw in the package comes from numpy's ``PCG64`` bit generator
seeded through a ``SeedSequence``. A stream is identified by the user seed plus
a tuple of small integers naming its purpose, so independent consumers (model
init, pair sampling, per-epoch shuffles) never share state.
"""

from __future__ import annotations

import numpy as np

# stream tags, appended to the user seed
INIT = 1
SYNTH = 2
PAIRS = 3
TRIPLETS = 4
SHUFFLE = 5
EVAL_PAIRS = 6


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))
