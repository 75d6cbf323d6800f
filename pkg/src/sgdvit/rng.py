"""Deterministic, splittable random streams.

Every stochastic site derives its generator from (seed, *stream keys), so a
run is reproducible regardless of call order and per-frame streams stay
independent.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
