"""Deterministic random streams keyed by role, iteration, and sample index.

Every stochastic draw in the samplers comes from a generator keyed by
(root_seed, purpose tag, iteration, global sample index).  The key never
depends on the worker count or rank, so a run with the same root seed
produces identical draws no matter how the samples are partitioned.
"""

from __future__ import annotations

import numpy as np

# Purpose tags.  Each role gets its own subspace of streams so that, for
# example, proposal noise at (k, i) can never collide with particle filter
# noise at (k, i).
PRIOR_INIT = 0
PARTICLE_FILTER = 1
PROPOSAL = 2
RESAMPLE_UNIFORM = 3
DATASET = 4
MCMC_CHAIN = 5


def stream(root_seed: int, tag: int, k: int = 0, i: int = 0) -> np.random.Generator:
    """Return the generator for stream (root_seed, tag, k, i)."""
    seq = np.random.SeedSequence(root_seed, spawn_key=(tag, k, i))
    return np.random.Generator(np.random.PCG64(seq))
