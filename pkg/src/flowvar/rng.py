"""Seeded random streams.

All randomness goes through ``numpy.random.Generator`` backed by the
counter-based Philox bit generator. Child streams are derived with
``SeedSequence`` spawn keys, so a parent seed plus an index tuple always
names the same stream regardless of execution order.
"""
from __future__ import annotations

import numpy as np

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def make_rng(seed: SeedLike = None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def child_rng(base_seed: int, *key: int) -> np.random.Generator:
    """Stream identified by ``(base_seed, key)``; independent of call order."""
    return make_rng(np.random.SeedSequence(base_seed, spawn_key=tuple(int(k) for k in key)))


def draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
