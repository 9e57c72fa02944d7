"""Deterministic RNG construction from structured integer keys."""

from __future__ import annotations

import numpy as np


def seeded_rng(*keys: int) -> np.random.Generator:
    """Generator seeded by a tuple of integers.

    Distinct key tuples give independent streams; the same tuple always
    reproduces the same stream, which keeps per-iteration randomness
    addressable (seed, iteration, item) without serializing RNG state.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
