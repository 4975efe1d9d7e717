"""Faithful Haar systems relative to frequencies, their composition, the block-basis
operators A and B, and restriction of multipliers to a product system."""

from __future__ import annotations

from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .dyadic import DyadicInterval, StepFunction1D, distribution, from_iota
from .multipliers import (
    DenseMultiplier,
    DenseMultiplier1D,
    HaarMultiplier2D,
    LevelOverflow,
    Multiplier1D,
)
from .spaces import HaarCoefficients2D, _levels

__all__ = [
    "FaithfulHaarSystem",
    "SUPPORT_CAP",
    "validate",
    "compose",
    "operator_B",
    "operator_A",
    "RestrictedMultiplier",
    "restrict_multiplier",
    "restrict_multiplier_1d",
    "distribution_preserved",
    "random_faithful_system",
    "propagate_labels",
]

SUPPORT_CAP = 1 << 24


def propagate_labels(labels: np.ndarray, signs: np.ndarray, gap: int) -> np.ndarray:
    """Owners one system level down: the left half of a cell with sign +1 goes to I^+ (index 2p),
    otherwise to I^- (2p+1); then refine by ``gap - 1`` further dyadic levels."""
    if gap < 1:
        raise ValueError("frequencies must be strictly increasing")
    plus = 2 * labels
    minus = 2 * labels + 1
    left = np.where(signs > 0, plus, minus)
    right = np.where(signs > 0, minus, plus)
    child = np.stack([left, right], axis=1).ravel()
    child[np.repeat(labels < 0, 2)] = -1
    return np.repeat(child, 1 << (gap - 1))


class FaithfulHaarSystem:
    """Frequencies m_0 < ... < m_K and, per level i, the support cells at level m_i with
    their owning interval index and sign.

    Level i is stored as three aligned arrays sorted by (owner, cell): ``cells[i]``,
    ``owners[i]`` and ``signs[i]``.  Construction only checks array shapes; use
    :func:`validate` for the faithfulness conditions.
    """

    def __init__(
        self,
        frequencies: Sequence[int],
        cells: Sequence[np.ndarray],
        owners: Sequence[np.ndarray],
        signs: Sequence[np.ndarray],
    ) -> None:
        freq = tuple(int(m) for m in frequencies)
        if not freq:
            raise ValueError("a faithful system needs at least one frequency")
        if not (len(cells) == len(owners) == len(signs) == len(freq)):
            raise ValueError("one support level per frequency is required")
        if sum(np.asarray(c).size for c in cells) > SUPPORT_CAP:
            raise ValueError(f"total support cardinality exceeds {SUPPORT_CAP}")
        self.frequencies = freq
        self.depth = len(freq) - 1
        self.cells, self.owners, self.signs = [], [], []
        for c, o, s in zip(cells, owners, signs):
            c = np.asarray(c, dtype=np.int64).ravel()
            o = np.asarray(o, dtype=np.int64).ravel()
            s = np.asarray(s, dtype=float).ravel()
            if not (c.shape == o.shape == s.shape):
                raise ValueError("cells, owners and signs must align")
            order = np.lexsort((c, o))
            for arr in (c, o, s):
                arr.setflags(write=False)
            self.cells.append(c[order])
            self.owners.append(o[order])
            self.signs.append(s[order])
        self._label_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # construction helpers
    @classmethod
    def from_label_arrays(
        cls, frequencies: Sequence[int], labels: Sequence[np.ndarray], signs: Sequence[np.ndarray]
    ) -> "FaithfulHaarSystem":
        """From per-level owner arrays over D_{m_i} (-1 = unowned) and per-cell signs."""
        cells, owners, sg = [], [], []
        for lab, s in zip(labels, signs):
            lab = np.asarray(lab, dtype=np.int64)
            idx = np.flatnonzero(lab >= 0)
            cells.append(idx)
            owners.append(lab[idx])
            sg.append(np.asarray(s, dtype=float)[idx])
        system = cls(frequencies, cells, owners, sg)
        for i, (lab, s) in enumerate(zip(labels, signs)):
            lab = np.asarray(lab, dtype=np.int64).copy()
            full = np.where(lab >= 0, np.asarray(s, dtype=float), 0.0)
            lab.setflags(write=False)
            full.setflags(write=False)
            system._label_cache[i] = (lab, full)
        return system

    @classmethod
    def from_level_signs(
        cls, frequencies: Sequence[int], level_signs: Sequence[np.ndarray]
    ) -> "FaithfulHaarSystem":
        """The unique faithful system with the given frequencies and per-cell signs
        (``level_signs[i]`` has length 2^{m_i}); supports follow from the signs."""
        freq = [int(m) for m in frequencies]
        labels = [np.zeros(1 << freq[0], dtype=np.int64)]
        for i in range(1, len(freq)):
            labels.append(propagate_labels(labels[-1], np.asarray(level_signs[i - 1]), freq[i] - freq[i - 1]))
        for i, s in enumerate(level_signs):
            if np.shape(s) != (1 << freq[i],):
                raise ValueError(f"level {i} needs {1 << freq[i]} signs")
        return cls.from_label_arrays(freq, labels, level_signs)

    @classmethod
    def trivial(cls, depth: int) -> "FaithfulHaarSystem":
        """h~_I = h_I with m_i = i."""
        return cls.from_level_signs(range(depth + 1), [np.ones(1 << i) for i in range(depth + 1)])

    # accessors
    def labels(self, level: int) -> np.ndarray:
        """Owner index (within D_level) of each cell of D_{m_level}; -1 where unowned."""
        return self._labels_and_signs(level)[0]

    def cell_signs(self, level: int) -> np.ndarray:
        """Sign of each cell of D_{m_level} in its owner's expansion; 0 where unowned."""
        return self._labels_and_signs(level)[1]

    def _labels_and_signs(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        hit = self._label_cache.get(level)
        if hit is None:
            size = 1 << self.frequencies[level]
            lab = np.full(size, -1, dtype=np.int64)
            sg = np.zeros(size)
            lab[self.cells[level]] = self.owners[level]
            sg[self.cells[level]] = self.signs[level]
            lab.setflags(write=False)
            sg.setflags(write=False)
            hit = (lab, sg)
            self._label_cache[level] = hit
        return hit

    def support(self, I: DyadicInterval) -> tuple[np.ndarray, np.ndarray]:
        """(cell indices at level m_{level I}, signs) of h~_I."""
        if I.level > self.depth:
            raise LevelOverflow(f"system depth {self.depth} has no interval at level {I.level}")
        o = self.owners[I.level]
        a, b = np.searchsorted(o, I.index), np.searchsorted(o, I.index, side="right")
        return self.cells[I.level][a:b], self.signs[I.level][a:b]

    def support_size(self) -> int:
        return sum(c.size for c in self.cells)

    def evaluate(self, I: DyadicInterval, grid_depth: int | None = None) -> StepFunction1D:
        """h~_I sampled on D_grid_depth."""
        m = self.frequencies[I.level]
        N = m + 1 if grid_depth is None else grid_depth
        if N < m + 1:
            raise ValueError(f"grid depth {N} too coarse for frequency {m}")
        cells, signs = self.support(I)
        vals = np.zeros(1 << N)
        half = 1 << (N - m - 1)
        for c, s in zip(cells.tolist(), signs.tolist()):
            vals[2 * c * half : (2 * c + 1) * half] = s
            vals[(2 * c + 1) * half : (2 * c + 2) * half] = -s
        return StepFunction1D(N, vals)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FaithfulHaarSystem):
            return NotImplemented
        return self.frequencies == other.frequencies and all(
            np.array_equal(a, b) and np.array_equal(c, d) and np.array_equal(e, f)
            for a, b, c, d, e, f in zip(
                self.cells, other.cells, self.owners, other.owners, self.signs, other.signs
            )
        )

    def __repr__(self) -> str:
        return f"FaithfulHaarSystem(frequencies={list(self.frequencies)})"

    # serialization
    def to_json(self) -> dict:
        intervals = []
        for i, m in enumerate(self.frequencies):
            for p in range(1 << i):
                I = DyadicInterval(i, p)
                cells, signs = self.support(I)
                intervals.append(
                    {
                        "iota": I.iota,
                        "support": [[m, int(c)] for c in cells],
                        "signs": [int(s) for s in signs],
                    }
                )
        return {"depth": self.depth, "frequencies": list(self.frequencies), "intervals": intervals}

    @classmethod
    def from_json(cls, data: Mapping) -> "FaithfulHaarSystem":
        try:
            depth = int(data["depth"])
            freq = [int(m) for m in data["frequencies"]]
            items = data["intervals"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"faithful-system JSON is missing field {exc}") from None
        if len(freq) != depth + 1:
            raise ValueError("field 'frequencies' must list depth + 1 values")
        cells = [[] for _ in freq]
        owners = [[] for _ in freq]
        signs = [[] for _ in freq]
        for n, item in enumerate(items):
            I = from_iota(int(item["iota"]))
            if I.level > depth:
                raise ValueError(f"intervals[{n}]: level {I.level} exceeds depth {depth}")
            sup, sg = item["support"], item["signs"]
            if len(sup) != len(sg):
                raise ValueError(f"intervals[{n}]: support and signs differ in length")
            for (lev, idx), s in zip(sup, sg):
                if int(lev) != freq[I.level]:
                    raise ValueError(f"intervals[{n}]: support level {lev} differs from frequency {freq[I.level]}")
                cells[I.level].append(int(idx))
                owners[I.level].append(I.index)
                signs[I.level].append(float(s))
        return cls(freq, cells, owners, signs)


def validate(system: FaithfulHaarSystem) -> list[str]:
    """Violations of the faithfulness conditions, one message each (empty means valid)."""
    out: list[str] = []
    freq = system.frequencies
    if freq[0] < 0:
        out.append("negative frequency m_0")
    for i in range(1, len(freq)):
        if freq[i] <= freq[i - 1]:
            out.append(f"frequencies not strictly increasing at level {i}")
    if out:
        return out
    ok_levels = []
    for i, m in enumerate(freq):
        c, o, s = system.cells[i], system.owners[i], system.signs[i]
        good = True
        if c.size and (c.min() < 0 or c.max() >= 1 << m):
            out.append(f"level {i}: support index outside D_{m}")
            good = False
        if o.size and (o.min() < 0 or o.max() >= 1 << i):
            out.append(f"level {i}: owner outside D_{i}")
            good = False
        if not np.all(np.abs(s) == 1.0):
            out.append(f"level {i}: signs must be +1 or -1")
        if np.unique(c).size != c.size:
            out.append(f"level {i}: supports overlap (clause (c))")
            good = False
        present = np.unique(o) if good else np.zeros(0)
        if good and present.size != 1 << i:
            missing = sorted(set(range(1 << i)) - set(present.tolist()))
            out.append(f"level {i}: empty support for {DyadicInterval(i, missing[0])}")
        ok_levels.append(good)
    if ok_levels[0] and system.cells[0].size != 1 << freq[0]:
        out.append("supp h~_[0,1) is not [0,1)")
    for i in range(system.depth):
        if not (ok_levels[i] and ok_levels[i + 1]):
            continue
        expected = propagate_labels(
            np.asarray(system.labels(i)), np.where(system.cell_signs(i) > 0, 1.0, -1.0), freq[i + 1] - freq[i]
        )
        actual = system.labels(i + 1)
        bad = np.flatnonzero(expected != actual)
        if bad.size:
            cell = int(bad[0])
            owner = int(actual[cell]) if actual[cell] >= 0 else int(expected[cell])
            child = DyadicInterval(i + 1, owner)
            parent, eps = child.parent, "+" if owner % 2 == 0 else "-"
            out.append(
                f"Gamma_{{I^{eps}}} != {{h~_I = {eps}1}} for I = {parent} (cell {cell} of D_{freq[i + 1]})"
            )
    return out


def compose(H2: FaithfulHaarSystem, H1: FaithfulHaarSystem) -> FaithfulHaarSystem:
    """H2 * H1: substitute h~^(1) into the expansion of h~^(2); frequencies n_{m_i}."""
    if max(H2.frequencies) > H1.depth:
        raise ValueError(
            f"composition needs depth(H1) >= {max(H2.frequencies)}, got {H1.depth}"
        )
    freq = [H1.frequencies[m] for m in H2.frequencies]
    if sum(1 << f for f in freq) > SUPPORT_CAP:
        raise ValueError(f"composed supports exceed {SUPPORT_CAP} intervals")
    labels, signs = [], []
    for i, m in enumerate(H2.frequencies):
        lab1, sg1 = H1.labels(m), H1.cell_signs(m)
        lab2, sg2 = H2.labels(i), H2.cell_signs(i)
        safe = np.where(lab1 >= 0, lab1, 0)
        owner = np.where(lab1 >= 0, lab2[safe], -1)
        labels.append(owner)
        signs.append(np.where(owner >= 0, sg2[safe] * sg1, 0.0))
    return FaithfulHaarSystem.from_label_arrays(freq, labels, signs)


# -- operators ------------------------------------------------------------------------


def operator_B(H: FaithfulHaarSystem, K: FaithfulHaarSystem, z: HaarCoefficients2D) -> HaarCoefficients2D:
    """Expand sum a_{I,J} h~_I (x) k~_J in the plain Haar tensor basis."""
    lf, ls = z.present_levels()
    if lf > H.depth or ls > K.depth:
        raise LevelOverflow(f"vector levels ({lf},{ls}) exceed system depths ({H.depth},{K.depth})")
    rows, cols, vals = [], [], []
    for r, c, a in zip(z.rows.tolist(), z.cols.tolist(), z.values.tolist()):
        I, J = from_iota(r), from_iota(c)
        ci, si = H.support(I)
        cj, sj = K.support(J)
        rows.append(np.repeat(ci + (1 << H.frequencies[I.level]), cj.size))
        cols.append(np.tile(cj + (1 << K.frequencies[J.level]), ci.size))
        vals.append(a * np.outer(si, sj).ravel())
    cat = (lambda xs: np.concatenate(xs)) if rows else (lambda xs: np.zeros(0))
    return HaarCoefficients2D(
        max(H.frequencies[: max(lf, 0) + 1]) if lf >= 0 else H.frequencies[0],
        max(K.frequencies[: max(ls, 0) + 1]) if ls >= 0 else K.frequencies[0],
        cat(rows),
        cat(cols),
        cat(vals),
    )


def _lookup(system: FaithfulHaarSystem, iotas: np.ndarray):
    """For each Haar index: (system level, owner index, sign), level -1 when not a support cell."""
    lev = _levels(iotas)
    pos = {m: i for i, m in enumerate(system.frequencies)}
    sys_level = np.array([pos.get(int(l), -1) for l in lev], dtype=np.int64)
    owner = np.full(iotas.size, -1, dtype=np.int64)
    sign = np.zeros(iotas.size)
    for i in np.unique(sys_level[sys_level >= 0]).tolist():
        sel = sys_level == i
        cell = iotas[sel] - (1 << system.frequencies[i])
        owner[sel] = system.labels(i)[cell]
        sign[sel] = system.cell_signs(i)[cell]
    sys_level[owner < 0] = -1
    return sys_level, owner, sign


def operator_A(H: FaithfulHaarSystem, K: FaithfulHaarSystem, z: HaarCoefficients2D) -> HaarCoefficients2D:
    """z -> (<h~_I (x) k~_J, z> / (|I||J|))_{I,J}."""
    lf, ls = z.present_levels()
    if lf > max(H.frequencies) or ls > max(K.frequencies):
        raise LevelOverflow("vector levels exceed the systems' largest frequencies")
    li, oi, si = _lookup(H, z.rows)
    lj, oj, sj = _lookup(K, z.cols)
    keep = (li >= 0) & (lj >= 0)
    li, oi, si, lj, oj, sj = (x[keep] for x in (li, oi, si, lj, oj, sj))
    mi = np.asarray(H.frequencies)[li] if li.size else li
    nj = np.asarray(K.frequencies)[lj] if lj.size else lj
    weight = np.ldexp(1.0, (li - mi + lj - nj).astype(int))
    vals = si * sj * z.values[keep] * weight
    rows = (np.int64(1) << li) + oi
    cols = (np.int64(1) << lj) + oj
    return HaarCoefficients2D(H.depth, K.depth, rows, cols, vals)


# -- restriction ----------------------------------------------------------------------


class RestrictedMultiplier(HaarMultiplier2D):
    """Lazy view of D restricted to H (x) K; blocks are computed on demand and cached.

    d~_{I,J} = sum_{L in A_I} |L|/|I| sum_{M in A_J} |M|/|J| d_{L,M}.
    """

    def __init__(self, D: HaarMultiplier2D, H: FaithfulHaarSystem, K: FaithfulHaarSystem) -> None:
        if max(H.frequencies) > D.max_level_first or max(K.frequencies) > D.max_level_second:
            raise LevelOverflow(
                f"frequencies ({max(H.frequencies)},{max(K.frequencies)}) exceed multiplier range "
                f"({D.max_level_first},{D.max_level_second})"
            )
        self.D, self.H, self.K = D, H, K
        self.max_level_first, self.max_level_second = H.depth, K.depth
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def kind(self) -> str:
        return "restricted"

    @property
    def exact(self) -> bool:
        return True

    def _block(self, i: int, j: int) -> np.ndarray:
        hit = self._cache.get((i, j))
        if hit is None:
            m, n = self.H.frequencies[i], self.K.frequencies[j]
            sums = self.D.aggregate(m, n, self.H.labels(i), 1 << i, self.K.labels(j), 1 << j)
            hit = np.ldexp(sums, -(m - i) - (n - j))
            hit.setflags(write=False)
            self._cache[(i, j)] = hit
        return hit


def restrict_multiplier(D: HaarMultiplier2D, H: FaithfulHaarSystem, K: FaithfulHaarSystem) -> DenseMultiplier:
    return RestrictedMultiplier(D, H, K).materialize()


def restrict_multiplier_1d(D1: Multiplier1D, H: FaithfulHaarSystem) -> DenseMultiplier1D:
    """d~_I = sum_{L in A_I} |L|/|I| d_L."""
    if max(H.frequencies) > D1.max_level:
        raise LevelOverflow("frequencies exceed the one-parameter multiplier range")
    blocks = []
    for i, m in enumerate(H.frequencies):
        lab = H.labels(i)
        ok = lab >= 0
        sums = np.bincount(lab[ok], weights=D1.block(m)[ok], minlength=1 << i)
        blocks.append(np.ldexp(sums, -(m - i)))
    return DenseMultiplier1D(blocks)


# -- distribution ---------------------------------------------------------------------


def _as_level_arrays(coefficients, max_depth: int) -> list[np.ndarray]:
    """Coefficients as per-level arrays a[level][index]."""
    if isinstance(coefficients, Mapping):
        items = [
            (k if isinstance(k, DyadicInterval) else from_iota(int(k)), float(v)) for k, v in coefficients.items()
        ]
        top = max((I.level for I, _ in items), default=-1)
        if top > max_depth:
            raise LevelOverflow(f"coefficient at level {top} beyond system depth {max_depth}")
        levels = [np.zeros(1 << i) for i in range(top + 1)]
        for I, v in items:
            levels[I.level][I.index] = v
        return levels
    levels = [np.asarray(a, dtype=float) for a in coefficients]
    if len(levels) - 1 > max_depth:
        raise LevelOverflow("coefficients beyond system depth")
    return levels


def _haar_sum(levels: Sequence[np.ndarray], freq: Sequence[int], label_sign, grid: int) -> np.ndarray:
    """Pointwise sum_i a_{owner} * sign * h, accumulated level by level."""
    cells = np.arange(1 << grid, dtype=np.int64)
    out = np.zeros(1 << grid)
    for i, a in enumerate(levels):
        m = freq[i]
        lab, sg = label_sign(i)
        anc = cells >> (grid - m)
        half = 1.0 - 2.0 * ((cells >> (grid - m - 1)) & 1)
        owner = lab[anc]
        out = out + np.where(owner >= 0, a[np.maximum(owner, 0)] * (sg[anc] * half), 0.0)
    return out


def distribution_preserved(H: FaithfulHaarSystem, coefficients) -> bool:
    """Whether sum a_I h_I and sum a_I h~_I have exactly the same distribution."""
    levels = _as_level_arrays(coefficients, H.depth)
    if not levels:
        return True
    top = len(levels) - 1
    plain = _haar_sum(
        levels,
        range(top + 1),
        lambda i: (np.arange(1 << i, dtype=np.int64), np.ones(1 << i)),
        top + 1,
    )
    grid = H.frequencies[top] + 1
    blocked = _haar_sum(levels, H.frequencies, lambda i: (H.labels(i), H.cell_signs(i)), grid)
    return distribution(StepFunction1D(top + 1, plain)) == distribution(StepFunction1D(grid, blocked))


def random_faithful_system(
    depth: int,
    rng: np.random.Generator,
    frequencies: Sequence[int] | None = None,
    max_frequency: int | None = None,
) -> FaithfulHaarSystem:
    """Random signs at every level; frequencies drawn as a sorted sample when not given."""
    if frequencies is None:
        top = 2 * depth + 2 if max_frequency is None else max_frequency
        if top < depth:
            raise ValueError("max_frequency must be at least depth")
        frequencies = np.sort(rng.choice(top + 1, size=depth + 1, replace=False)).tolist()
    freq = [int(m) for m in frequencies]
    if len(freq) != depth + 1:
        raise ValueError("need depth + 1 frequencies")
    signs = [rng.choice([-1.0, 1.0], size=1 << m) for m in freq]
    return FaithfulHaarSystem.from_level_signs(freq, signs)


# exposed for tests that need exact support measures
def support_measure(system: FaithfulHaarSystem, I: DyadicInterval) -> Fraction:
    cells, _ = system.support(I)
    return Fraction(cells.size, 1 << system.frequencies[I.level])
