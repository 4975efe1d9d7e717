"""Dyadic intervals, the iota order and step functions on dyadic grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

__all__ = [
    "DyadicInterval",
    "RootHasNoParent",
    "GridTooCoarse",
    "ROOT",
    "iota",
    "from_iota",
    "children_and_parent",
    "intervals_at_level",
    "intervals_upto",
    "StepFunction1D",
    "StepFunction2D",
    "haar_step",
    "haar_sign_pattern",
    "distribution",
]


class RootHasNoParent(ValueError):
    pass


class GridTooCoarse(ValueError):
    pass


@dataclass(frozen=True, order=True)
class DyadicInterval:
    """The interval [index * 2^-level, (index + 1) * 2^-level)."""

    level: int
    index: int

    def __post_init__(self) -> None:
        if self.level < 0:
            raise ValueError(f"negative level {self.level}")
        if not 0 <= self.index < (1 << self.level):
            raise ValueError(f"index {self.index} out of range at level {self.level}")

    @property
    def measure(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def start(self) -> Fraction:
        return Fraction(self.index, 1 << self.level)

    @property
    def end(self) -> Fraction:
        return Fraction(self.index + 1, 1 << self.level)

    @property
    def iota(self) -> int:
        return (1 << self.level) + self.index

    @property
    def plus(self) -> "DyadicInterval":
        """Left half I^+."""
        return DyadicInterval(self.level + 1, 2 * self.index)

    @property
    def minus(self) -> "DyadicInterval":
        """Right half I^-."""
        return DyadicInterval(self.level + 1, 2 * self.index + 1)

    def child(self, omega: int) -> "DyadicInterval":
        return self.plus if omega > 0 else self.minus

    @property
    def is_root(self) -> bool:
        return self.level == 0

    @property
    def parent(self) -> "DyadicInterval":
        if self.level == 0:
            raise RootHasNoParent("[0,1) has no parent")
        return DyadicInterval(self.level - 1, self.index >> 1)

    def ancestor(self, level: int) -> "DyadicInterval":
        if not 0 <= level <= self.level:
            raise ValueError(f"no ancestor at level {level} for {self}")
        return DyadicInterval(level, self.index >> (self.level - level))

    def contains(self, other: "DyadicInterval") -> bool:
        if other.level < self.level:
            return False
        return (other.index >> (other.level - self.level)) == self.index

    def cells(self, depth: int) -> slice:
        """Slice of the cells of D_depth covering this interval."""
        if depth < self.level:
            raise GridTooCoarse(f"depth {depth} is coarser than level {self.level}")
        width = 1 << (depth - self.level)
        return slice(self.index * width, (self.index + 1) * width)

    def __str__(self) -> str:
        return f"[{self.start},{self.end})"


ROOT = DyadicInterval(0, 0)


def iota(interval: DyadicInterval) -> int:
    return interval.iota


def from_iota(n: int) -> DyadicInterval:
    if n < 1:
        raise ValueError(f"iota values start at 1, got {n}")
    level = int(n).bit_length() - 1
    return DyadicInterval(level, n - (1 << level))


def children_and_parent(
    interval: DyadicInterval,
) -> tuple[DyadicInterval, DyadicInterval, DyadicInterval | None]:
    """Return (I^+, I^-, parent) with ``None`` standing for the root marker."""
    parent = None if interval.is_root else interval.parent
    return interval.plus, interval.minus, parent


def intervals_at_level(level: int) -> Iterator[DyadicInterval]:
    for k in range(1 << level):
        yield DyadicInterval(level, k)


def intervals_upto(max_level: int) -> Iterator[DyadicInterval]:
    """All intervals with level <= max_level in iota order."""
    for level in range(max_level + 1):
        yield from intervals_at_level(level)


def haar_sign_pattern(level: int, depth: int) -> np.ndarray:
    """Sign of h_I on the cells of D_depth inside I, for any I at ``level``."""
    if depth < level + 1:
        raise GridTooCoarse(f"h_I at level {level} needs grid depth >= {level + 1}, got {depth}")
    half = 1 << (depth - level - 1)
    return np.concatenate([np.ones(half), -np.ones(half)])


@dataclass(frozen=True)
class StepFunction1D:
    grid_depth: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (1 << self.grid_depth,):
            raise ValueError(f"expected {1 << self.grid_depth} values, got shape {vals.shape}")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def refine(self, depth: int) -> "StepFunction1D":
        if depth < self.grid_depth:
            raise GridTooCoarse("refinement cannot lower the grid depth")
        return StepFunction1D(depth, np.repeat(self.values, 1 << (depth - self.grid_depth)))

    def __add__(self, other: "StepFunction1D") -> "StepFunction1D":
        if not isinstance(other, StepFunction1D):
            return NotImplemented
        if other.grid_depth != self.grid_depth:
            raise ValueError("grid depths differ; refine explicitly before combining")
        return StepFunction1D(self.grid_depth, self.values + other.values)

    def __sub__(self, other: "StepFunction1D") -> "StepFunction1D":
        return self + (-1.0) * other

    def __rmul__(self, scalar: float) -> "StepFunction1D":
        return StepFunction1D(self.grid_depth, scalar * self.values)

    @classmethod
    def constant(cls, value: float, grid_depth: int = 0) -> "StepFunction1D":
        return cls(grid_depth, np.full(1 << grid_depth, float(value)))

    @classmethod
    def indicator(cls, interval: DyadicInterval, grid_depth: int) -> "StepFunction1D":
        vals = np.zeros(1 << grid_depth)
        vals[interval.cells(grid_depth)] = 1.0
        return cls(grid_depth, vals)


@dataclass(frozen=True)
class StepFunction2D:
    """Values on the cells of D_N x D_N; entry (r, c) is the (s-cell r, t-cell c) value."""

    grid_depth: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        side = 1 << self.grid_depth
        if vals.shape != (side, side):
            raise ValueError(f"expected a {side}x{side} array, got shape {vals.shape}")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def integral(self) -> float:
        return float(self.values.mean())

    @classmethod
    def tensor(cls, f: StepFunction1D, g: StepFunction1D) -> "StepFunction2D":
        if f.grid_depth != g.grid_depth:
            raise ValueError("grid depths differ")
        return cls(f.grid_depth, np.outer(f.values, g.values))


def haar_step(interval: DyadicInterval, grid_depth: int) -> StepFunction1D:
    """h_I sampled on D_N: +1 on I^+, -1 on I^-, 0 elsewhere."""
    pattern = haar_sign_pattern(interval.level, grid_depth)
    vals = np.zeros(1 << grid_depth)
    vals[interval.cells(grid_depth)] = pattern
    return StepFunction1D(grid_depth, vals)


def distribution(f: StepFunction1D) -> list[tuple[float, Fraction]]:
    """Distinct values in increasing order with their exact Lebesgue measure."""
    values, counts = np.unique(f.values, return_counts=True)
    total = 1 << f.grid_depth
    return [(float(v), Fraction(int(c), total)) for v, c in zip(values, counts)]
