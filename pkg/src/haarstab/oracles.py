"""Slow, independent reference computations used to cross-check the fast paths."""

from __future__ import annotations

import numpy as np

from .dyadic import DyadicInterval, from_iota, intervals_upto
from .faithful import FaithfulHaarSystem, operator_B
from .multipliers import HaarMultiplier2D, apply_multiplier
from .spaces import HaarCoefficients2D

__all__ = ["restriction_by_inner_products", "iota_roundtrip", "sign_pattern_oracle"]


def restriction_by_inner_products(
    D: HaarMultiplier2D, H: FaithfulHaarSystem, K: FaithfulHaarSystem
) -> dict[tuple[int, int], np.ndarray]:
    """<h~_I (x) k~_J, D(h~_I (x) k~_J)> / (|I| |J|) on a sampling grid, block by block."""
    grid = max(max(H.frequencies), max(K.frequencies)) + 1
    out: dict[tuple[int, int], np.ndarray] = {}
    for i in range(H.depth + 1):
        for j in range(K.depth + 1):
            blk = np.zeros((1 << i, 1 << j))
            for a in range(1 << i):
                for b in range(1 << j):
                    I, J = DyadicInterval(i, a), DyadicInterval(j, b)
                    z = operator_B(H, K, HaarCoefficients2D.single(I, J))
                    w = apply_multiplier(D, z)
                    inner = float((z.evaluate(grid).values * w.evaluate(grid).values).mean())
                    blk[a, b] = inner / (I.measure * J.measure)
            out[(i, j)] = blk
    return out


def iota_roundtrip(max_level: int) -> bool:
    """iota is a bijection of intervals up to ``max_level`` onto 1 .. 2^(max_level+1) - 1."""
    seen = [I.iota for I in intervals_upto(max_level)]
    if sorted(seen) != list(range(1, 1 << (max_level + 1))):
        return False
    return all(from_iota(n).iota == n for n in seen)


def sign_pattern_oracle(I: DyadicInterval, grid_depth: int) -> np.ndarray:
    """h_I on the grid by direct comparison of cell midpoints with I's halves."""
    n = 1 << grid_depth
    mid = (np.arange(n) + 0.5) / n
    a, m, b = float(I.start), float(I.start + I.end) / 2, float(I.end)
    return np.where((mid >= a) & (mid < m), 1.0, np.where((mid >= m) & (mid < b), -1.0, 0.0))
