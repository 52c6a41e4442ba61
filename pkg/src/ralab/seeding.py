"""Deterministic RNG derivation from structured integer keys."""

import numpy as np


def derive_rng(*key) -> np.random.Generator:
    """Child generator keyed by a tuple of ints, e.g. (seed, example, iteration)."""
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in key)))
