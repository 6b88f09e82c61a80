"""Deterministic RNG stream derivation.

Every stream is keyed by a tuple of non-negative integers fed to
numpy's SeedSequence, so concurrent tasks get independent, reproducible
generators: stream = derive_rng(base_seed, task_index, ...).
"""

import numpy as np

from .errors import ConfigurationError


def derive_rng(*key: int) -> np.random.Generator:
    """Generator for the stream identified by `key` (ints >= 0)."""
    parts = []
    for k in key:
        k = int(k)
        if k < 0:
            raise ConfigurationError(f"rng key parts must be >= 0, got {k}")
        parts.append(k)
    return np.random.default_rng(np.random.SeedSequence(tuple(parts)))
