"""Deterministic random-stream derivation.

All stochastic code in the package draws from numpy Generators derived here.
A stream is identified by a base seed plus a tuple of integer keys (epoch,
sample index, worker id, ...), so the same keys always reproduce the same
stream regardless of execution order or worker count.
"""

from __future__ import annotations

import numpy as np


def derive_rng(base_seed: int, *keys: int) -> np.random.Generator:
    """Return a Generator keyed by (base_seed, *keys).

    Distinct key tuples give statistically independent streams; identical
    tuples give bit-identical streams.
    """
    entropy = [int(base_seed)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
