"""Seed plumbing.

Every stochastic routine in the package takes an explicit generator or a
seed tuple; nothing touches numpy's global RNG state. `make_rng` derives
independent streams from a base seed plus integer keys, so e.g. step 1234
of a training run always sees the same draws regardless of what happened
on earlier steps.
"""

import numpy as np


def make_rng(*keys: int) -> np.random.Generator:
    """Build a generator from a tuple of non-negative integer keys."""
    if not keys:
        raise ValueError("make_rng needs at least one seed key")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))
