"""Deterministic k-fold assignment from a hash of (event index, seed)."""

from __future__ import annotations

import numpy as np


def _splitmix64(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = v + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def fold_assignment(index, k: int, seed: int) -> np.ndarray:
    """Fold in ``[0, k)`` for each event index; stable across runs and platforms."""
    index = np.asarray(index, dtype=np.uint64)
    key = _splitmix64(np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    return (_splitmix64(index ^ key) % np.uint64(k)).astype(np.int64)


SCHEMES = ("kfold", "holdout")


def holdout_mask(n: int, seed: int) -> np.ndarray:
    """Training half of a two-way hash split; the complement is hunted."""
    return fold_assignment(np.arange(n), 2, seed ^ 0x5EED) == 0
