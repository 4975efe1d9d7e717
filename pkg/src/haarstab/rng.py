"""Counter-based hashing for addressable pseudo-random values.

Every value is a pure function of its key, so sign ``(seed, sample, iota)`` or
entry ``(seed, iotaI, iotaJ)`` can be produced in any order or in parallel.
The mixer is the SplitMix64 finalizer applied to a running combination of the
key words.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["hash_words", "uniform_pm1", "rademacher", "seed_from_env", "SEED_ENV"]

SEED_ENV = "HAARSTAB_SEED"

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK = (1 << 64) - 1


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _as_u64(word) -> np.ndarray:
    arr = np.asarray(word)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64).view(np.uint64) if arr.dtype.kind == "i" else arr.astype(np.uint64)
    return np.asarray(int(word) & _MASK, dtype=np.uint64)


def hash_words(*words) -> np.ndarray:
    """Hash broadcastable integer arrays into uint64 values."""
    with np.errstate(over="ignore"):
        acc = np.asarray(0, dtype=np.uint64)
        for w in words:
            acc = _mix(acc + _GOLDEN + _as_u64(w))
        return acc


def uniform_pm1(*words) -> np.ndarray:
    """Map hashed keys to floats in [-1, 1)."""
    h = hash_words(*words)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -52) - 1.0


def rademacher(*words) -> np.ndarray:
    """+-1 values (float) from the top bit of the hashed key."""
    h = hash_words(*words)
    return 1.0 - 2.0 * (h >> np.uint64(63)).astype(np.float64)


def seed_from_env(seed: int) -> int:
    """Apply the environment override to a configured seed."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return int(seed)
    return int(raw.strip(), 0)
