"""Bi-parameter Haar multipliers: backings, pavement averages, lambda/mu, variation norms,
canonical operators, pointwise multiplier fields and the proximity checks."""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dyadic import DyadicInterval, GridTooCoarse, StepFunction2D
from .rng import uniform_pm1
from .spaces import HaarCoefficients2D, NormEstimate, ZSpaceSpec, _levels, field_norm, z_norm

__all__ = [
    "LevelOverflow",
    "UnsupportedBacking",
    "HaarMultiplier2D",
    "DenseMultiplier",
    "LevelMultiplier",
    "SeededMultiplier",
    "LinearCombination",
    "identity",
    "capon",
    "multiplier_from_json",
    "Multiplier1D",
    "DenseMultiplier1D",
    "LevelMultiplier1D",
    "SeededMultiplier1D",
    "RowSlice",
    "ColumnSlice",
    "e_avg",
    "LambdaMu",
    "lambda_mu",
    "VariationReport",
    "t2_variation",
    "default_truncation",
    "t_variation_1d",
    "apply_multiplier",
    "capon_apply",
    "lower_part",
    "upper_part",
    "project_leq",
    "sub_restrict",
    "down_scale",
    "up_scale",
    "m_field",
    "PointwiseIntReport",
    "pointwise_int_check",
    "is_eventually_constant",
    "RootProximity",
    "root_proximity_check",
    "PwProximity",
    "pw_proximity_check",
]

SEEDED_BLOCK_CAP = 26
_CHUNK = 1 << 22


class LevelOverflow(ValueError):
    pass


class UnsupportedBacking(ValueError):
    pass


# -- label aggregation helpers --------------------------------------------------------


def _runs(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start offsets of maximal constant runs and the label of each run."""
    labels = np.asarray(labels)
    starts = np.flatnonzero(np.r_[True, labels[1:] != labels[:-1]])
    return starts, labels[starts]


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((labels.size, n))
    ok = np.flatnonzero(labels >= 0)
    out[ok, labels[ok]] = 1.0
    return out


def _group_sum(block: np.ndarray, row_labels, n_rows, col_labels, n_cols) -> np.ndarray:
    """Sum of block entries grouped by (row label, column label); label -1 is skipped."""
    cs, cl = _runs(col_labels)
    rs, rl = _runs(row_labels)
    tmp = np.add.reduceat(block, cs, axis=1) @ _onehot(cl, n_cols)
    return _onehot(rl, n_rows).T @ np.add.reduceat(tmp, rs, axis=0)


# -- two-parameter multipliers --------------------------------------------------------


class HaarMultiplier2D(ABC):
    """Entry accessor (I, J) -> d_{I,J} for levels up to the declared maxima."""

    max_level_first: int
    max_level_second: int

    @property
    def kind(self) -> str:
        return type(self).__name__

    @property
    def exact(self) -> bool:
        """True when sup_norm is an attained maximum rather than a certified bound."""
        return True

    def _check(self, i: int, j: int) -> None:
        if not (0 <= i <= self.max_level_first and 0 <= j <= self.max_level_second):
            raise LevelOverflow(
                f"level pair ({i},{j}) outside declared range "
                f"({self.max_level_first},{self.max_level_second})"
            )

    @abstractmethod
    def _block(self, i: int, j: int) -> np.ndarray: ...

    def block(self, i: int, j: int) -> np.ndarray:
        """Entries d_{I,J}, I in D_i (rows), J in D_j (columns), as a 2^i x 2^j array."""
        self._check(i, j)
        return self._block(i, j)

    def entry(self, I: DyadicInterval, J: DyadicInterval) -> float:
        self._check(I.level, J.level)
        return float(self.entries(np.array([I.iota]), np.array([J.iota]))[0])

    def entries(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Vectorized d for iota arrays ``rows`` and ``cols`` of equal shape."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        out = np.zeros(rows.shape)
        li, lj = _levels(rows.ravel()).reshape(rows.shape), _levels(cols.ravel()).reshape(cols.shape)
        for i, j in set(zip(li.ravel().tolist(), lj.ravel().tolist())):
            sel = (li == i) & (lj == j)
            out[sel] = self.block(i, j)[rows[sel] - (1 << i), cols[sel] - (1 << j)]
        return out

    def aggregate(self, i, j, row_labels, n_rows, col_labels, n_cols) -> np.ndarray:
        """n_rows x n_cols sums of block(i, j) grouped by row/column labels (-1 skipped)."""
        self._check(i, j)
        return _group_sum(self._block(i, j), np.asarray(row_labels), n_rows, np.asarray(col_labels), n_cols)

    def e_avg(self, i: int, j: int) -> float:
        self._check(i, j)
        return float(self._block(i, j).mean())

    def sup_norm(self) -> float:
        return max(
            float(np.abs(self._block(i, j)).max())
            for i in range(self.max_level_first + 1)
            for j in range(self.max_level_second + 1)
        )

    def materialize(self) -> "DenseMultiplier":
        return DenseMultiplier.from_function(self.max_level_first, self.max_level_second, self.block)

    def to_json(self) -> dict:
        return self.materialize().to_json()


class DenseMultiplier(HaarMultiplier2D):
    """Every block stored explicitly; summed-area tables accelerate rectangle sums."""

    def __init__(self, max_level_first: int, max_level_second: int, blocks: Mapping | None = None) -> None:
        self.max_level_first = int(max_level_first)
        self.max_level_second = int(max_level_second)
        self._blocks: dict[tuple[int, int], np.ndarray] = {}
        self._sat: dict[tuple[int, int], np.ndarray] = {}
        blocks = blocks or {}
        for i in range(self.max_level_first + 1):
            for j in range(self.max_level_second + 1):
                b = blocks.get((i, j))
                arr = np.zeros((1 << i, 1 << j)) if b is None else np.array(b, dtype=float)
                if arr.shape != (1 << i, 1 << j):
                    raise ValueError(f"block ({i},{j}) has shape {arr.shape}, expected {(1 << i, 1 << j)}")
                arr.setflags(write=False)
                self._blocks[(i, j)] = arr

    @property
    def kind(self) -> str:
        return "dense"

    @classmethod
    def from_function(cls, max_level_first: int, max_level_second: int, fn: Callable) -> "DenseMultiplier":
        return cls(
            max_level_first,
            max_level_second,
            {(i, j): fn(i, j) for i in range(max_level_first + 1) for j in range(max_level_second + 1)},
        )

    @classmethod
    def from_entries(cls, max_level_first, max_level_second, rows, cols, values) -> "DenseMultiplier":
        blocks = {
            (i, j): np.zeros((1 << i, 1 << j))
            for i in range(max_level_first + 1)
            for j in range(max_level_second + 1)
        }
        for r, c, v in zip(rows, cols, values):
            r, c = int(r), int(c)
            i, j = r.bit_length() - 1, c.bit_length() - 1
            if r < 1 or c < 1 or i > max_level_first or j > max_level_second:
                raise LevelOverflow(f"entry ({r},{c}) outside declared range")
            blocks[(i, j)][r - (1 << i), c - (1 << j)] = float(v)
        return cls(max_level_first, max_level_second, blocks)

    @classmethod
    def random(cls, max_level_first: int, max_level_second: int, rng: np.random.Generator, scale: float = 1.0):
        return cls.from_function(
            max_level_first,
            max_level_second,
            lambda i, j: rng.uniform(-scale, scale, size=(1 << i, 1 << j)),
        )

    def _block(self, i: int, j: int) -> np.ndarray:
        return self._blocks[(i, j)]

    def _table(self, i: int, j: int) -> np.ndarray:
        sat = self._sat.get((i, j))
        if sat is None:
            sat = np.zeros(((1 << i) + 1, (1 << j) + 1))
            sat[1:, 1:] = self._blocks[(i, j)].cumsum(axis=0).cumsum(axis=1)
            self._sat[(i, j)] = sat
        return sat

    def rect_sum(self, i: int, j: int, r0: int, r1: int, c0: int, c1: int) -> float:
        """Sum of block(i, j)[r0:r1, c0:c1] from the summed-area table."""
        self._check(i, j)
        s = self._table(i, j)
        return float(s[r1, c1] - s[r0, c1] - s[r1, c0] + s[r0, c0])

    def aggregate(self, i, j, row_labels, n_rows, col_labels, n_cols) -> np.ndarray:
        self._check(i, j)
        row_labels, col_labels = np.asarray(row_labels), np.asarray(col_labels)
        rs, rl = _runs(row_labels)
        cs, cl = _runs(col_labels)
        if rs.size * cs.size * 16 > row_labels.size * col_labels.size:
            return _group_sum(self._blocks[(i, j)], row_labels, n_rows, col_labels, n_cols)
        s = self._table(i, j)
        rb = np.r_[rs, row_labels.size]
        cb = np.r_[cs, col_labels.size]
        t = s[np.ix_(rb, cb)]
        rect = t[1:, 1:] - t[:-1, 1:] - t[1:, :-1] + t[:-1, :-1]
        return _onehot(rl, n_rows).T @ rect @ _onehot(cl, n_cols)

    def to_json(self) -> dict:
        entries = []
        for (i, j), b in sorted(self._blocks.items()):
            r, c = np.nonzero(b)
            for a, bb in zip(r.tolist(), c.tolist()):
                entries.append([(1 << i) + a, (1 << j) + bb, float(b[a, bb])])
        entries.sort()
        return {
            "kind": "dense",
            "maxLevelFirst": self.max_level_first,
            "maxLevelSecond": self.max_level_second,
            "entries": entries,
        }


class LevelMultiplier(HaarMultiplier2D):
    """Entries depend only on the level pair: d_{I,J} = matrix[level I, level J]."""

    def __init__(self, matrix, max_level_first: int | None = None, max_level_second: int | None = None):
        mat = np.array(matrix, dtype=float)
        if mat.ndim != 2 or mat.size == 0:
            raise ValueError("level matrix must be a non-empty 2D array")
        lf = mat.shape[0] - 1 if max_level_first is None else int(max_level_first)
        ls = mat.shape[1] - 1 if max_level_second is None else int(max_level_second)
        if mat.shape[0] < lf + 1 or mat.shape[1] < ls + 1:
            raise ValueError(f"level matrix of shape {mat.shape} does not cover levels ({lf},{ls})")
        mat = mat[: lf + 1, : ls + 1].copy()
        mat.setflags(write=False)
        self.matrix = mat
        self.max_level_first, self.max_level_second = lf, ls

    @property
    def kind(self) -> str:
        return "level"

    def _block(self, i: int, j: int) -> np.ndarray:
        return np.full((1 << i, 1 << j), self.matrix[i, j])

    def entries(self, rows, cols) -> np.ndarray:
        li = _levels(np.asarray(rows, dtype=np.int64).ravel())
        lj = _levels(np.asarray(cols, dtype=np.int64).ravel())
        if li.size and (li.max() > self.max_level_first or lj.max() > self.max_level_second):
            raise LevelOverflow("entry query beyond declared levels")
        return self.matrix[li, lj].reshape(np.shape(rows))

    def aggregate(self, i, j, row_labels, n_rows, col_labels, n_cols) -> np.ndarray:
        self._check(i, j)
        rl, cl = np.asarray(row_labels), np.asarray(col_labels)
        rc = np.bincount(rl[rl >= 0], minlength=n_rows)[:n_rows].astype(float)
        cc = np.bincount(cl[cl >= 0], minlength=n_cols)[:n_cols].astype(float)
        return self.matrix[i, j] * np.outer(rc, cc)

    def e_avg(self, i: int, j: int) -> float:
        self._check(i, j)
        return float(self.matrix[i, j])

    def sup_norm(self) -> float:
        return float(np.abs(self.matrix).max())

    def to_json(self) -> dict:
        return {
            "kind": "level",
            "maxLevelFirst": self.max_level_first,
            "maxLevelSecond": self.max_level_second,
            "matrix": self.matrix.tolist(),
        }


class SeededMultiplier(HaarMultiplier2D):
    """d_{I,J} = amplitude * u(hash(seed, iota I, iota J)), u uniform on [-1, 1); never stored."""

    def __init__(self, seed: int, amplitude: float, max_level_first: int, max_level_second: int) -> None:
        if amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        self.seed = int(seed)
        self.amplitude = float(amplitude)
        self.max_level_first, self.max_level_second = int(max_level_first), int(max_level_second)

    @property
    def kind(self) -> str:
        return "seeded"

    @property
    def exact(self) -> bool:
        return False

    def _check(self, i: int, j: int) -> None:
        super()._check(i, j)
        if i + j > SEEDED_BLOCK_CAP:
            raise LevelOverflow(f"seeded blocks are capped at level sum {SEEDED_BLOCK_CAP}, got {i}+{j}")

    def _rows(self, i: int, j: int, r0: int, r1: int) -> np.ndarray:
        rows = np.arange((1 << i) + r0, (1 << i) + r1, dtype=np.int64)[:, None]
        cols = np.arange(1 << j, 1 << (j + 1), dtype=np.int64)[None, :]
        return self.amplitude * uniform_pm1(self.seed, rows, cols)

    def _chunks(self, i: int, j: int):
        step = max(1, _CHUNK >> j)
        for r0 in range(0, 1 << i, step):
            r1 = min(1 << i, r0 + step)
            yield r0, r1, self._rows(i, j, r0, r1)

    def _block(self, i: int, j: int) -> np.ndarray:
        return self._rows(i, j, 0, 1 << i)

    def entries(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size:
            if _levels(rows.ravel()).max() > self.max_level_first or _levels(cols.ravel()).max() > self.max_level_second:
                raise LevelOverflow("entry query beyond declared levels")
        return self.amplitude * uniform_pm1(self.seed, rows, cols)

    def aggregate(self, i, j, row_labels, n_rows, col_labels, n_cols) -> np.ndarray:
        self._check(i, j)
        rl, cl = np.asarray(row_labels), np.asarray(col_labels)
        out = np.zeros((n_rows, n_cols))
        for r0, r1, chunk in self._chunks(i, j):
            out += _group_sum(chunk, rl[r0:r1], n_rows, cl, n_cols)
        return out

    def e_avg(self, i: int, j: int) -> float:
        self._check(i, j)
        total = 0.0
        for _, _, chunk in self._chunks(i, j):
            total += float(chunk.sum())
        return total / float(1 << (i + j))

    def sup_norm(self) -> float:
        return self.amplitude

    def to_json(self) -> dict:
        return {
            "kind": "seeded",
            "maxLevelFirst": self.max_level_first,
            "maxLevelSecond": self.max_level_second,
            "seed": self.seed,
            "amplitude": self.amplitude,
        }


class LinearCombination(HaarMultiplier2D):
    """sum_r c_r D_r over the common level range."""

    def __init__(self, terms: Sequence[tuple[float, HaarMultiplier2D]]) -> None:
        if not terms:
            raise ValueError("empty linear combination")
        self.terms = [(float(c), D) for c, D in terms]
        self.max_level_first = min(D.max_level_first for _, D in self.terms)
        self.max_level_second = min(D.max_level_second for _, D in self.terms)

    @property
    def kind(self) -> str:
        return "combination"

    @property
    def exact(self) -> bool:
        return all(D.exact for _, D in self.terms)

    def _block(self, i: int, j: int) -> np.ndarray:
        return sum(c * D.block(i, j) for c, D in self.terms)

    def entries(self, rows, cols) -> np.ndarray:
        return sum(c * D.entries(rows, cols) for c, D in self.terms)

    def aggregate(self, i, j, row_labels, n_rows, col_labels, n_cols) -> np.ndarray:
        self._check(i, j)
        return sum(c * D.aggregate(i, j, row_labels, n_rows, col_labels, n_cols) for c, D in self.terms)

    def e_avg(self, i: int, j: int) -> float:
        self._check(i, j)
        return float(sum(c * D.e_avg(i, j) for c, D in self.terms))

    def sup_norm(self) -> float:
        if self.exact:
            return super().sup_norm()
        return float(sum(abs(c) * D.sup_norm() for c, D in self.terms))


def identity(max_level_first: int, max_level_second: int) -> LevelMultiplier:
    return LevelMultiplier(np.ones((max_level_first + 1, max_level_second + 1)))


def capon(max_level_first: int, max_level_second: int) -> LevelMultiplier:
    """The lower-triangular projection: 1 where level(I) >= level(J)."""
    i = np.arange(max_level_first + 1)[:, None]
    j = np.arange(max_level_second + 1)[None, :]
    return LevelMultiplier((i >= j).astype(float))


def multiplier_from_json(data: Mapping) -> HaarMultiplier2D:
    """Parse the multiplier schema; raises ValueError naming the offending field."""
    if not isinstance(data, Mapping):
        raise ValueError("multiplier JSON must be an object")
    kind = data.get("kind")
    try:
        lf = int(data["maxLevelFirst"])
        ls = int(data["maxLevelSecond"])
    except KeyError as exc:
        raise ValueError(f"multiplier JSON is missing field {exc}") from None
    except (TypeError, ValueError):
        raise ValueError("maxLevelFirst/maxLevelSecond must be integers") from None
    if lf < 0 or ls < 0:
        raise ValueError("declared levels must be nonnegative")
    if kind == "dense":
        if "entries" not in data:
            raise ValueError("dense multiplier JSON is missing field 'entries'")
        rows, cols, vals = [], [], []
        for n, item in enumerate(data["entries"]):
            if not isinstance(item, (list, tuple)) or len(item) != 3:
                raise ValueError(f"entries[{n}] must be [iotaI, iotaJ, d]")
            rows.append(int(item[0]))
            cols.append(int(item[1]))
            vals.append(float(item[2]))
        return DenseMultiplier.from_entries(lf, ls, rows, cols, vals)
    if kind == "level":
        if "matrix" not in data:
            raise ValueError("level multiplier JSON is missing field 'matrix'")
        try:
            return LevelMultiplier(np.array(data["matrix"], dtype=float), lf, ls)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"field 'matrix': {exc}") from None
    if kind == "seeded":
        try:
            return SeededMultiplier(int(data["seed"]), float(data["amplitude"]), lf, ls)
        except KeyError as exc:
            raise ValueError(f"seeded multiplier JSON is missing field {exc}") from None
    raise ValueError(f"field 'kind' must be dense, level or seeded, got {kind!r}")


# -- one-parameter multipliers --------------------------------------------------------


class Multiplier1D(ABC):
    """Entry accessor I -> d_I for levels up to ``max_level``."""

    max_level: int

    @abstractmethod
    def _block(self, level: int) -> np.ndarray: ...

    def block(self, level: int) -> np.ndarray:
        if not 0 <= level <= self.max_level:
            raise LevelOverflow(f"level {level} beyond declared maximum {self.max_level}")
        return self._block(level)

    def entry(self, I: DyadicInterval) -> float:
        return float(self.block(I.level)[I.index])

    def sup_norm(self) -> float:
        return max(float(np.abs(self._block(k)).max()) for k in range(self.max_level + 1))


class DenseMultiplier1D(Multiplier1D):
    def __init__(self, blocks: Sequence) -> None:
        self._blocks = []
        for k, b in enumerate(blocks):
            arr = np.array(b, dtype=float)
            if arr.shape != (1 << k,):
                raise ValueError(f"level {k} needs {1 << k} entries")
            arr.setflags(write=False)
            self._blocks.append(arr)
        self.max_level = len(self._blocks) - 1

    def _block(self, level: int) -> np.ndarray:
        return self._blocks[level]


class LevelMultiplier1D(Multiplier1D):
    def __init__(self, values: Sequence[float]) -> None:
        self.values = np.array(values, dtype=float)
        self.max_level = self.values.size - 1

    def _block(self, level: int) -> np.ndarray:
        return np.full(1 << level, self.values[level])


class SeededMultiplier1D(Multiplier1D):
    def __init__(self, seed: int, amplitude: float, max_level: int) -> None:
        self.seed, self.amplitude, self.max_level = int(seed), float(amplitude), int(max_level)

    def _block(self, level: int) -> np.ndarray:
        return self.amplitude * uniform_pm1(self.seed, np.arange(1 << level, 1 << (level + 1), dtype=np.int64))

    def sup_norm(self) -> float:
        return self.amplitude


class RowSlice(Multiplier1D):
    """I -> d_{I,J} for a fixed J (the operator D_{(.,J)})."""

    def __init__(self, D: HaarMultiplier2D, J: DyadicInterval) -> None:
        self.D, self.J, self.max_level = D, J, D.max_level_first

    def _block(self, level: int) -> np.ndarray:
        rows = np.arange(1 << level, 1 << (level + 1), dtype=np.int64)
        return self.D.entries(rows, np.full(rows.shape, self.J.iota))


class ColumnSlice(Multiplier1D):
    """J -> d_{I,J} for a fixed I (the operator D_{(I,.)})."""

    def __init__(self, D: HaarMultiplier2D, I: DyadicInterval) -> None:
        self.D, self.I, self.max_level = D, I, D.max_level_second

    def _block(self, level: int) -> np.ndarray:
        cols = np.arange(1 << level, 1 << (level + 1), dtype=np.int64)
        return self.D.entries(np.full(cols.shape, self.I.iota), cols)


def t_variation_1d(D1: Multiplier1D, truncation_level: int | None = None) -> float:
    """sum over levels k <= L of |d_I - d_{I+}| + |d_I - d_{I-}|, plus |d_root|."""
    L = D1.max_level - 1 if truncation_level is None else truncation_level
    if L + 1 > D1.max_level:
        raise LevelOverflow(f"truncation {L} needs entries at level {L + 1}")
    total = abs(float(D1.block(0)[0]))
    for k in range(L + 1):
        parent = D1.block(k)
        kids = D1.block(k + 1).reshape(-1, 2)
        total += float(np.abs(kids - parent[:, None]).sum())
    return total


# -- pavement averages and lambda/mu --------------------------------------------------


def e_avg(D: HaarMultiplier2D, i: int, j: int) -> float:
    """E_{i,j} = 2^{-i-j} sum over D_i x D_j of d_{I,J}."""
    return D.e_avg(i, j)


@dataclass(frozen=True)
class LambdaMu:
    lambda_: float
    mu: float
    lo_level: int
    hi_level: int
    window_levels: tuple[int, ...]
    convergence_table: np.ndarray = field(repr=False)
    converged: bool
    tol: float

    def to_json(self) -> dict:
        return {
            "lambda": self.lambda_,
            "mu": self.mu,
            "loLevel": self.lo_level,
            "hiLevel": self.hi_level,
            "windowLevels": list(self.window_levels),
            "convergenceTable": self.convergence_table.tolist(),
            "converged": self.converged,
            "tol": self.tol,
        }


def default_window(lo: int, hi: int) -> int:
    return max(0, min(2, (hi - lo - 1) // 2))


def lambda_mu(
    D: HaarMultiplier2D, lo: int, hi: int, window: int | None = None, tol: float = 1e-6
) -> LambdaMu:
    """lambda = E_{hi,lo}, mu = E_{lo,hi}; converged when E is flat (spread < tol) on the
    window blocks {hi-w..hi} x {lo..lo+w} (lambda) and its transpose (mu)."""
    if not 0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got lo={lo}, hi={hi}")
    if hi > min(D.max_level_first, D.max_level_second):
        raise LevelOverflow(f"hi level {hi} exceeds the declared levels")
    w = default_window(lo, hi) if window is None else int(window)
    if w < 0 or lo + w > hi or hi - w < 0:
        raise LevelOverflow(f"window {w} does not fit between levels {lo} and {hi}")
    levels = tuple(sorted(set(range(lo, lo + w + 1)) | set(range(hi - w, hi + 1))))
    pos = {lev: n for n, lev in enumerate(levels)}
    table = np.array([[D.e_avg(a, b) for b in levels] for a in levels])
    lam_block = np.array([[table[pos[a], pos[b]] for b in range(lo, lo + w + 1)] for a in range(hi - w, hi + 1)])
    mu_block = np.array([[table[pos[b], pos[a]] for b in range(lo, lo + w + 1)] for a in range(hi - w, hi + 1)])
    spread = max(np.ptp(lam_block), np.ptp(mu_block))
    table.setflags(write=False)
    return LambdaMu(
        float(table[pos[hi], pos[lo]]),
        float(table[pos[lo], pos[hi]]),
        lo,
        hi,
        levels,
        table,
        bool(spread < tol),
        tol,
    )


# -- variation norms ------------------------------------------------------------------


@dataclass(frozen=True)
class VariationReport:
    t2s_semi_norm: float
    roots: tuple[float, float, float]
    t2_norm: float
    truncation_level: int
    per_term: tuple[float, float, float, float]  # diagonal, superdiagonal, lower, upper

    def to_json(self) -> dict:
        return {
            "t2sSemiNorm": self.t2s_semi_norm,
            "roots": list(self.roots),
            "t2Norm": self.t2_norm,
            "truncationLevel": self.truncation_level,
            "perTermBreakdown": dict(zip(("diagonal", "superdiagonal", "lower", "upper"), self.per_term)),
        }


def default_truncation(D: HaarMultiplier2D) -> int:
    """Largest L with first-coordinate entries to L+1 and second-coordinate entries to L+2."""
    return min(D.max_level_first - 1, D.max_level_second - 2)


def _child_gap(parent: np.ndarray, child: np.ndarray, rows: bool, cols: bool) -> float:
    """max |d_parent - d_child| over children obtained by splitting rows and/or columns."""
    p, q = parent.shape
    shape = (p, 2 if rows else 1, q, 2 if cols else 1)
    return float(np.abs(child.reshape(shape) - parent[:, None, :, None]).max())


def t2_variation(D: HaarMultiplier2D, truncation_level: int | None = None) -> VariationReport:
    L = default_truncation(D) if truncation_level is None else int(truncation_level)
    if L < 0 or L + 1 > D.max_level_first or L + 2 > D.max_level_second:
        raise LevelOverflow(
            f"truncation {L} needs levels ({L + 1},{L + 2}); declared "
            f"({D.max_level_first},{D.max_level_second})"
        )
    blocks: dict[tuple[int, int], np.ndarray] = {}

    def B(i, j):
        if (i, j) not in blocks:
            blocks[(i, j)] = D.block(i, j)
        return blocks[(i, j)]

    diag = sum((k + 1) * _child_gap(B(k, k), B(k + 1, k + 1), True, True) for k in range(L + 1))
    sup = sum((k + 1) * _child_gap(B(k, k + 1), B(k + 1, k + 2), True, True) for k in range(L + 1))
    lower = sum(_child_gap(B(i, j), B(i + 1, j), True, False) for i in range(L + 1) for j in range(i + 1))
    upper = sum(_child_gap(B(i, j + 1), B(i, j + 2), False, True) for j in range(L + 1) for i in range(j + 1))
    r = B(0, 1)
    roots = (float(B(0, 0)[0, 0]), float(r[0, 0]), float(r[0, 1]))
    t2s = diag + sup + lower + upper
    return VariationReport(
        float(t2s), roots, float(t2s + sum(abs(x) for x in roots)), L, (diag, sup, lower, upper)
    )


# -- coefficient-level operators ------------------------------------------------------


def _check_levels(D: HaarMultiplier2D, z: HaarCoefficients2D) -> None:
    lf, ls = z.present_levels()
    if lf > D.max_level_first or ls > D.max_level_second:
        raise LevelOverflow(f"vector levels ({lf},{ls}) exceed multiplier range")


def apply_multiplier(D: HaarMultiplier2D, z: HaarCoefficients2D) -> HaarCoefficients2D:
    _check_levels(D, z)
    vals = z.values * D.entries(z.rows, z.cols) if len(z) else z.values
    return HaarCoefficients2D(z.max_level_first, z.max_level_second, z.rows, z.cols, vals)


def lower_part(z: HaarCoefficients2D) -> HaarCoefficients2D:
    """Pairs with level(I) >= level(J)."""
    return z.mask(z.row_levels >= z.col_levels)


def upper_part(z: HaarCoefficients2D) -> HaarCoefficients2D:
    return z.mask(z.row_levels < z.col_levels)


def capon_apply(z: HaarCoefficients2D) -> HaarCoefficients2D:
    return lower_part(z)


def project_leq(I: DyadicInterval, J: DyadicInterval, z: HaarCoefficients2D) -> HaarCoefficients2D:
    """Keep (K, L) with iota(K) <= iota(I) and iota(L) <= iota(J)."""
    return z.mask((z.rows <= I.iota) & (z.cols <= J.iota))


def _inside(iotas: np.ndarray, K0: DyadicInterval) -> np.ndarray:
    lev = _levels(iotas)
    ok = lev >= K0.level
    anc = np.where(ok, iotas >> np.maximum(lev - K0.level, 0), 0)
    return ok & (anc == K0.iota)


def sub_restrict(K0: DyadicInterval, L0: DyadicInterval, z: HaarCoefficients2D) -> HaarCoefficients2D:
    """Keep (K, L) with K inside K0 and L inside L0."""
    return z.mask(_inside(z.rows, K0) & _inside(z.cols, L0))


def _scaling_check(I0: DyadicInterval, J0: DyadicInterval) -> int:
    if I0.level != J0.level:
        raise ValueError(f"scaling needs |I0| = |J0|, got levels {I0.level} and {J0.level}")
    return I0.level


def down_scale(I0: DyadicInterval, J0: DyadicInterval, z: HaarCoefficients2D) -> HaarCoefficients2D:
    """h_I (x) k_J -> h_{rho(I)} (x) k_{tau(J)} with rho, tau the affine maps of [0,1) onto I0, J0."""
    l0 = _scaling_check(I0, J0)
    li, lj = z.row_levels, z.col_levels
    rows = z.rows + (np.int64(1) << li) * (I0.iota - 1)
    cols = z.cols + (np.int64(1) << lj) * (J0.iota - 1)
    return HaarCoefficients2D(z.max_level_first + l0, z.max_level_second + l0, rows, cols, z.values)


def up_scale(I0: DyadicInterval, J0: DyadicInterval, z: HaarCoefficients2D) -> HaarCoefficients2D:
    """Inverse of down_scale on pairs inside I0 x J0; everything else is dropped."""
    l0 = _scaling_check(I0, J0)
    kept = sub_restrict(I0, J0, z)
    li, lj = kept.row_levels - l0, kept.col_levels - l0
    rows = kept.rows - (np.int64(1) << li) * (I0.iota - 1)
    cols = kept.cols - (np.int64(1) << lj) * (J0.iota - 1)
    return HaarCoefficients2D(
        max(z.max_level_first - l0, 0), max(z.max_level_second - l0, 0), rows, cols, kept.values
    )


# -- pointwise multiplier fields ------------------------------------------------------


def m_field(D: HaarMultiplier2D, k: int, which: int, grid_depth: int) -> StepFunction2D:
    """m_{1,k} = sum over D_k x D_k of d chi_{IxJ}; m_{2,k} the same over D_k x D_{k+1}."""
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    j = k if which == 1 else k + 1
    if grid_depth < j:
        raise GridTooCoarse(f"m-field {which} at level {k} needs grid depth >= {j}")
    block = D.block(k, j)
    vals = np.repeat(np.repeat(block, 1 << (grid_depth - k), axis=0), 1 << (grid_depth - j), axis=1)
    return StepFunction2D(grid_depth, vals)


@dataclass(frozen=True)
class PointwiseIntReport:
    lambda_: float
    int_m1: float
    mu: float
    int_m2: float
    gaps: tuple[float, float]

    def to_json(self) -> dict:
        return {
            "lambda": self.lambda_,
            "intM1": self.int_m1,
            "mu": self.mu,
            "intM2": self.int_m2,
            "gaps": list(self.gaps),
        }


def is_eventually_constant(D: HaarMultiplier2D, k: int, max_level: int | None = None) -> bool:
    """Entries at level pairs beyond k repeat their level-k ancestor pattern: lower pairs copy
    block (k, k), upper pairs copy block (k, k+1)."""
    if not D.exact:
        raise UnsupportedBacking("eventual constancy cannot be certified for a seeded backing")
    top = min(D.max_level_first, D.max_level_second) if max_level is None else max_level
    base_l, base_u = D.block(k, k), D.block(k, k + 1)
    for i in range(k, top + 1):
        for j in range(k, top + 1):
            if i >= j:
                ref = np.repeat(np.repeat(base_l, 1 << (i - k), axis=0), 1 << (j - k), axis=1)
            else:
                ref = np.repeat(np.repeat(base_u, 1 << (i - k), axis=0), 1 << (j - k - 1), axis=1)
            if not np.array_equal(D.block(i, j), ref):
                return False
    return True


def pointwise_int_check(
    D: HaarMultiplier2D, k: int, lo: int, hi: int, certified: bool = False
) -> PointwiseIntReport:
    """Compare lambda/mu at (lo, hi) with the integrals of m_{1,k} and m_{2,k}."""
    if not D.exact:
        raise UnsupportedBacking("pointwise integral check is not supported for seeded backings")
    if not certified and not is_eventually_constant(D, k):
        raise ValueError(f"multiplier is not eventually level-constant from level {k}")
    lm = lambda_mu(D, lo, hi, window=0)
    int1 = m_field(D, k, 1, k).integral()
    int2 = m_field(D, k, 2, k + 1).integral()
    return PointwiseIntReport(lm.lambda_, int1, lm.mu, int2, (abs(lm.lambda_ - int1), abs(lm.mu - int2)))


# -- proximity checks -----------------------------------------------------------------


@dataclass(frozen=True)
class RootProximity:
    lhs: float
    rhs: float
    passed: bool
    lambda_mu: LambdaMu

    def to_json(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "pass": self.passed, "lambdaMu": self.lambda_mu.to_json()}


def root_proximity_check(
    D: HaarMultiplier2D,
    truncation_level: int | None = None,
    lo: int | None = None,
    hi: int | None = None,
) -> RootProximity:
    """|lambda - d_root| + |mu - mean of the two root successors| against the T^2 norm."""
    rep = t2_variation(D, truncation_level)
    hi = rep.truncation_level + 1 if hi is None else hi
    lo = hi - 1 if lo is None else lo
    lm = lambda_mu(D, lo, hi)
    d0, dl, dr = rep.roots
    lhs = abs(lm.lambda_ - d0) + abs(lm.mu - 0.5 * (dl + dr))
    return RootProximity(lhs, rep.t2_norm, bool(lhs <= rep.t2_norm + 1e-12), lm)


@dataclass(frozen=True)
class PwProximity:
    lhs1: NormEstimate
    lhs2: NormEstimate
    z_norm: NormEstimate
    t2s: float
    rhs: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "lhs1": self.lhs1.to_json(),
            "lhs2": self.lhs2.to_json(),
            "zNorm": self.z_norm.to_json(),
            "t2sSemiNorm": self.t2s,
            "rhsBound": self.rhs,
            "pass": self.passed,
        }


def pw_proximity_check(
    D: HaarMultiplier2D,
    z: HaarCoefficients2D,
    spec: ZSpaceSpec,
    grid_depth: int | None = None,
    samples: int = 2000,
    seed: int = 0,
    truncation_level: int | None = None,
    method: str = "auto",
    abs_tol: float = 1e-9,
) -> PwProximity:
    """Sampled norms of sum_lower (d - m_1(s,t)) sigma a h k and sum_upper (d - m_2(s,t)) sigma a h k
    against 4 ||D||_{T^2S} ||z||_Z, with m_1, m_2 the pointwise fields one level past the truncation."""
    _check_levels(D, z)
    rep = t2_variation(D, truncation_level)
    k = rep.truncation_level + 1
    need = max(z.default_grid_depth(), k + 2)
    N = need if grid_depth is None else grid_depth
    if N < need:
        raise GridTooCoarse(f"proximity check needs grid depth >= {need}")
    m1 = m_field(D, k, 1, N).values
    m2 = m_field(D, k, 2, N).values
    Dz = apply_multiplier(D, z)
    lo, lo_d = lower_part(z), lower_part(Dz)
    up, up_d = upper_part(z), upper_part(Dz)
    kw = dict(method=method, samples=samples, seed=seed)
    lhs1 = field_norm([(lo_d, None), (lo, -m1)], spec, N, **kw)
    lhs2 = field_norm([(up_d, None), (up, -m2)], spec, N, **kw)
    zn = z_norm(z, spec, N, **kw)
    rhs = 4.0 * rep.t2s_semi_norm * zn.value
    slack_z = 4.0 * rep.t2s_semi_norm * zn.std_error
    ok = all(
        est.value <= rhs + 3.0 * math.hypot(est.std_error, slack_z) + abs_tol for est in (lhs1, lhs2)
    )
    return PwProximity(lhs1, lhs2, zn, rep.t2s_semi_norm, rhs, bool(ok))
