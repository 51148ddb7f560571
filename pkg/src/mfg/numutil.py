"""Small numeric helpers shared across modules."""

from __future__ import annotations

import numpy as np

__all__ = ["sorted_mean", "sorted_sum"]


def sorted_sum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum over ``axis`` after sorting, so the result is bit-identical under
    any permutation of the summands (exchangeability claims are exact)."""
    return np.sort(a, axis=axis).sum(axis=axis)


def sorted_mean(a: np.ndarray, axis: int = -1) -> np.ndarray:
    n = a.shape[axis]
    return sorted_sum(a, axis=axis) / n
