"""Randomized stabilization of bi-parameter Haar multipliers.

Sign choices are drawn level by level and every inequality they are meant to secure
is checked directly before the choice is committed (verify-then-retry).  Frequencies
interleave as n_0 < m_0 < n_1 < m_1 < ... so that each new sign layer only affects
entries whose partners are already fixed.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .faithful import (
    FaithfulHaarSystem,
    RestrictedMultiplier,
    compose,
    propagate_labels,
    restrict_multiplier,
)
from .multipliers import (
    SEEDED_BLOCK_CAP,
    DenseMultiplier,
    DenseMultiplier1D,
    HaarMultiplier2D,
    LambdaMu,
    LevelOverflow,
    LinearCombination,
    Multiplier1D,
    _group_sum,
    capon,
    identity,
    lambda_mu,
    t2_variation,
)

__all__ = [
    "StabilizationError",
    "RetryExhausted",
    "FrequencyBudgetExhausted",
    "InsufficientDepth",
    "InsufficientWindow",
    "VarianceBudgetViolated",
    "StabilizationFailed",
    "EtaSchedule",
    "StabilizeConfig",
    "ConditionReport",
    "CONDITIONS",
    "STAGES",
    "check_conditions",
    "Split1D",
    "Split2D",
    "random_split_1d",
    "random_split_2d",
    "split_cells",
    "variance_bound_1d",
    "variance_bound_2d",
    "one_param_stabilize",
    "stabilize_stage",
    "StabilizeResult",
    "stabilize_full",
]

CONDITIONS = ("lower", "upper", "diagonal", "superdiagonal", "balancing")
STAGES = {
    "triangular": ("lower", "upper"),
    "superdiagonal": ("superdiagonal",),
    "diagonal": ("diagonal",),
    "balancing": ("balancing",),
}
STAGE_ORDER = ("triangular", "superdiagonal", "diagonal", "balancing")


class StabilizationError(RuntimeError):
    def __init__(self, message: str, stage: str | None = None) -> None:
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class RetryExhausted(StabilizationError):
    pass


class FrequencyBudgetExhausted(StabilizationError):
    pass


class InsufficientDepth(StabilizationError):
    def __init__(self, message: str, stage: str | None, need: int) -> None:
        super().__init__(message, stage)
        self.need = need


class InsufficientWindow(StabilizationError):
    pass


class VarianceBudgetViolated(StabilizationError):
    pass


class StabilizationFailed(StabilizationError):
    def __init__(self, message: str, report: "ConditionReport") -> None:
        super().__init__(message)
        self.report = report


# -- schedules and configuration ------------------------------------------------------


class EtaSchedule:
    """Positive tolerances eta_{i,j} over a finite index range 0..size-1."""

    def __init__(self, matrix) -> None:
        mat = np.array(matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.size == 0:
            raise ValueError("eta must be a non-empty square matrix")
        if not np.all((mat > 0) & (mat < 1)):
            raise ValueError("eta values must lie in (0, 1)")
        mat.setflags(write=False)
        self.matrix = mat

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def flat(cls, value: float, size: int = 32) -> "EtaSchedule":
        return cls(np.full((size, size), float(value)))

    @classmethod
    def geometric(cls, base: float, ratio: float, size: int = 32) -> "EtaSchedule":
        """eta_{i,j} = base * ratio^(i+j)."""
        k = np.arange(size)
        return cls(base * float(ratio) ** (k[:, None] + k[None, :]))

    def __call__(self, i: int, j: int) -> float:
        if not (0 <= i < self.size and 0 <= j < self.size):
            raise LevelOverflow(f"eta_{{{i},{j}}} outside the schedule range {self.size}")
        return float(self.matrix[i, j])

    @property
    def summable(self) -> bool:
        """Tail sums along rows and columns stay below a third of the entry (checked on the range)."""
        m = self.matrix
        row_tail = np.cumsum(m[:, ::-1], axis=1)[:, ::-1]
        col_tail = np.cumsum(m[::-1, :], axis=0)[::-1, :]
        rt = np.zeros_like(m)
        ct = np.zeros_like(m)
        rt[:, :-1] = row_tail[:, 1:]
        ct[:-1, :] = col_tail[1:, :]
        return bool(np.all(rt < m / 3) and np.all(ct < m / 3))

    def proximity_bound(self, K: int) -> float:
        """sum_{i,j<=K} (i+j+4) eta_{i,j}."""
        k = np.arange(K + 1)
        return float(((k[:, None] + k[None, :] + 4) * self.matrix[: K + 1, : K + 1]).sum())

    def to_json(self) -> list:
        return self.matrix.tolist()


@dataclass(frozen=True)
class StabilizeConfig:
    output_depth: int = 2
    delta_balance: float = 0.2
    frequency_budget: int = 16
    seed: int = 0
    retry_limit: int = 32
    pipeline_attempts: int = 8

    def __post_init__(self) -> None:
        if self.output_depth < 1:
            raise ValueError("outputDepth must be at least 1")
        if self.frequency_budget <= 2 * self.output_depth:
            raise ValueError("frequencyBudget must exceed 2 * outputDepth")
        if self.delta_balance <= 0:
            raise ValueError("deltaBalance must be positive")
        if self.retry_limit < 1:
            raise ValueError("retryLimit must be positive")


# -- condition checks -----------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    lower: float
    upper: float
    diagonal: float
    superdiagonal: float
    balancing: float
    passed: bool
    depth: int

    def slack(self, name: str) -> float:
        return getattr(self, name)

    def passes(self, names: Iterable[str]) -> bool:
        return all(self.slack(n) >= 0 for n in names)

    def to_json(self) -> dict:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "diagonal": self.diagonal,
            "superdiagonal": self.superdiagonal,
            "balancing": self.balancing,
            "pass": self.passed,
            "depth": self.depth,
        }


def _gap(parent: np.ndarray, child: np.ndarray, rows: bool, cols: bool) -> np.ndarray:
    """|child - parent| reshaped to (p, 2|1, q, 2|1)."""
    p, q = parent.shape
    return np.abs(child.reshape(p, 2 if rows else 1, q, 2 if cols else 1) - parent[:, None, :, None])


def check_conditions(
    D: HaarMultiplier2D, eta: EtaSchedule, delta: float, depth: int
) -> ConditionReport:
    """Worst slack eta - |difference| of each semi-stability condition up to ``depth``.

    Lower: i <= depth, j <= i.  Upper: i < j <= depth + 1.  Diagonal and superdiagonal:
    k <= depth.  Balancing: delta - |d_{root,[0,1/2)} - d_{root,[1/2,1)}|.
    """
    if depth < 0 or D.max_level_first < depth + 1 or D.max_level_second < depth + 2:
        raise LevelOverflow(f"conditions at depth {depth} need levels ({depth + 1},{depth + 2})")
    cache: dict = {}

    def B(i, j):
        if (i, j) not in cache:
            cache[(i, j)] = D.block(i, j)
        return cache[(i, j)]

    lower = min(eta(i, j) - _gap(B(i, j), B(i + 1, j), True, False).max() for i in range(depth + 1) for j in range(i + 1))
    upper = min(
        eta(i, j) - _gap(B(i, j), B(i, j + 1), False, True).max()
        for j in range(1, depth + 2)
        for i in range(j)
    )
    diagonal = min(eta(k, k) - _gap(B(k, k), B(k + 1, k + 1), True, True).max() for k in range(depth + 1))
    superdiagonal = min(
        eta(k, k + 1) - _gap(B(k, k + 1), B(k + 1, k + 2), True, True).max() for k in range(depth + 1)
    )
    r = B(0, 1)
    balancing = delta - abs(float(r[0, 0] - r[0, 1]))
    slacks = [float(x) for x in (lower, upper, diagonal, superdiagonal, balancing)]
    return ConditionReport(*slacks, passed=all(s >= 0 for s in slacks), depth=depth)


# -- probabilistic splitting ----------------------------------------------------------


def split_cells(cells: np.ndarray, signs: np.ndarray, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(Gamma^+, Gamma^-) at level n for Gamma given by level-m ``cells`` split by ``signs``."""
    if n <= m:
        raise ValueError("target level must exceed the split level")
    cells = np.asarray(cells, dtype=np.int64)
    left, right = 2 * cells, 2 * cells + 1
    plus = np.where(signs > 0, left, right)
    minus = np.where(signs > 0, right, left)
    w = 1 << (n - m - 1)
    offs = np.arange(w, dtype=np.int64)
    return np.sort((plus[:, None] * w + offs).ravel()), np.sort((minus[:, None] * w + offs).ravel())


def _descendants(cells: np.ndarray, m: int, n: int) -> np.ndarray:
    w = 1 << (n - m)
    return (np.asarray(cells, dtype=np.int64)[:, None] * w + np.arange(w, dtype=np.int64)).ravel()


def variance_bound_1d(m: int, gamma_cells: int, max_entry: float) -> float:
    """2^{-m} / |Gamma| * max d^2, with |Gamma| = gamma_cells * 2^{-m}."""
    return max_entry**2 / gamma_cells


def variance_bound_2d(sup_norm: float, gamma_cells: int, delta_cells: int) -> float:
    """4 ||D||^2 (2^{-i}/|Gamma| + 2^{-j}/|Delta|)."""
    return 4.0 * sup_norm**2 * (1.0 / gamma_cells + 1.0 / delta_cells)


@dataclass(frozen=True)
class Split1D:
    signs: np.ndarray
    gamma_plus: np.ndarray
    gamma_minus: np.ndarray
    averages: np.ndarray  # (family, omega) averages over Gamma^omega at the target level
    attempts: int


def random_split_1d(
    families: Sequence[Multiplier1D],
    gamma: np.ndarray,
    m: int,
    n: int,
    delta: float,
    rng: np.random.Generator,
    retry_limit: int = 32,
    enforce_budget: bool = True,
) -> Split1D:
    """Random signs on Gamma (level m) whose halves keep every family's level-n average
    within delta + |avg_m - avg_n| of its level-m average over Gamma."""
    if not m < n:
        raise ValueError("need m < n")
    gamma = np.asarray(gamma, dtype=np.int64)
    if gamma.size == 0:
        raise ValueError("Gamma is empty")
    if enforce_budget:
        top = max(f.sup_norm() for f in families)
        if variance_bound_1d(m, gamma.size, top) * len(families) > delta**2 / 4:
            raise VarianceBudgetViolated("Chebyshev budget violated; deepen the split level or enlarge delta")
    avg_m = np.array([f.block(m)[gamma].mean() for f in families])
    fine = [f.block(n) for f in families]
    avg_n = np.array([b[_descendants(gamma, m, n)].mean() for b in fine])
    allowed = delta + np.abs(avg_m - avg_n)
    for attempt in range(1, retry_limit + 1):
        signs = rng.choice([-1.0, 1.0], size=gamma.size)
        gp, gm = split_cells(gamma, signs, m, n)
        avgs = np.array([[b[gp].mean(), b[gm].mean()] for b in fine])
        if np.all(np.abs(avgs - avg_m[:, None]) <= allowed[:, None]):
            return Split1D(signs, gp, gm, avgs, attempt)
    raise RetryExhausted(f"no admissible split after {retry_limit} draws")


@dataclass(frozen=True)
class Split2D:
    eps: np.ndarray
    theta: np.ndarray
    averages: np.ndarray  # (omega, xi) averages of block (k, l) over Gamma^omega x Delta^xi
    attempts: int


def _rect_avg(block: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    return float(block[np.ix_(rows, cols)].mean())


def _as_index(idx: np.ndarray):
    # sorted, duplicate-free indices: a contiguous run becomes a slice (a view, no copy)
    if idx.size and idx[-1] - idx[0] + 1 == idx.size:
        return slice(int(idx[0]), int(idx[-1]) + 1)
    return idx


def _sub_block(block: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r, c = _as_index(rows), _as_index(cols)
    if isinstance(r, slice) or isinstance(c, slice):
        return block[r][:, c] if isinstance(r, slice) else block[r, c]
    return block[np.ix_(r, c)]


def random_split_2d(
    D: HaarMultiplier2D,
    gamma: np.ndarray,
    i: int,
    delta_set: np.ndarray,
    j: int,
    k: int,
    l: int,
    delta: float,
    rng: np.random.Generator,
    retry_limit: int = 32,
    enforce_budget: bool = True,
) -> Split2D:
    """Signs on Gamma (level i) and Delta (level j) keeping all four level-(k,l) quadrant
    averages within delta + |d^{ij} - d^{kl}| of d^{ij}_{Gamma,Delta}."""
    if not (i < k and j < l):
        raise ValueError("need i < k and j < l")
    gamma = np.asarray(gamma, dtype=np.int64)
    dset = np.asarray(delta_set, dtype=np.int64)
    if enforce_budget and 4 * variance_bound_2d(D.sup_norm(), gamma.size, dset.size) > delta**2 / 4:
        raise VarianceBudgetViolated("Chebyshev budget violated; enlarge Gamma/Delta or delta")
    coarse = _rect_avg(D.block(i, j), gamma, dset)
    row_desc, col_desc = _descendants(gamma, i, k), _descendants(dset, j, l)
    sub = _sub_block(D.block(k, l), row_desc, col_desc)
    full = float(sub.mean())
    allowed = delta + abs(coarse - full)
    for attempt in range(1, retry_limit + 1):
        eps = rng.choice([-1.0, 1.0], size=gamma.size)
        theta = rng.choice([-1.0, 1.0], size=dset.size)
        rows = split_cells(gamma, eps, i, k)
        cols = split_cells(dset, theta, j, l)
        # quadrant averages as P_rows @ sub @ P_cols^T with 0/1 indicator rows
        pr = np.zeros((2, row_desc.size))
        pc = np.zeros((2, col_desc.size))
        for w in range(2):
            pr[w, np.searchsorted(row_desc, rows[w])] = 1.0 / rows[w].size
            pc[w, np.searchsorted(col_desc, cols[w])] = 1.0 / cols[w].size
        avgs = pr @ (sub @ pc.T)
        if np.all(np.abs(avgs - coarse) <= allowed):
            return Split2D(eps, theta, avgs, attempt)
    raise RetryExhausted(f"no admissible split after {retry_limit} draws")


# -- one-parameter stabilization ------------------------------------------------------


def one_param_stabilize(
    D1: Multiplier1D,
    eta: Sequence[float] | float,
    window: tuple[int, int],
    output_depth: int,
    rng: np.random.Generator,
    retry_limit: int = 32,
) -> tuple[FaithfulHaarSystem, DenseMultiplier1D]:
    """Faithful system with frequencies inside ``window`` such that the restricted
    multiplier satisfies |d~_L - d~_{L^omega}| <= eta_{level L} below ``output_depth``."""
    lo, hi = window
    hi = min(hi, D1.max_level)
    etas = [float(eta)] * (output_depth + 1) if np.isscalar(eta) else [float(e) for e in eta]
    if len(etas) < output_depth:
        raise ValueError("eta must cover every level below the output depth")
    for offset in range(0, hi - lo - output_depth + 1):
        freq = [lo + offset]
        labels = [np.zeros(1 << freq[0], dtype=np.int64)]
        signs: list[np.ndarray] = []
        avgs = [np.array([D1.block(freq[0]).mean()])]
        ok = True
        for k in range(output_depth):
            placed = False
            g = 1
            while freq[k] + g + (output_depth - k - 1) <= hi:
                nxt = freq[k] + g
                fine = D1.block(nxt)
                sg = rng.choice([-1.0, 1.0], size=1 << freq[k])
                for _ in range(retry_limit):
                    lab = propagate_labels(labels[k], sg, g)
                    child = np.ldexp(np.bincount(lab, weights=fine, minlength=1 << (k + 1)), -(nxt - k - 1))
                    bad = np.abs(child.reshape(-1, 2) - avgs[k][:, None]).max(axis=1) > etas[k]
                    if not bad.any():
                        placed = True
                        break
                    redo = bad[labels[k]]
                    sg[redo] = rng.choice([-1.0, 1.0], size=int(redo.sum()))
                if placed:
                    freq.append(nxt)
                    labels.append(lab)
                    signs.append(sg)
                    avgs.append(child)
                    break
                g += 1
            if not placed:
                ok = False
                break
        if ok:
            signs.append(rng.choice([-1.0, 1.0], size=1 << freq[-1]))
            H = FaithfulHaarSystem.from_label_arrays(freq, labels, signs)
            return H, DenseMultiplier1D(avgs)
    raise InsufficientWindow(f"entry averages do not settle within levels {lo}..{hi}")


# -- bi-parameter engine --------------------------------------------------------------


class _BlockCache(HaarMultiplier2D):
    """Memoizes base blocks of an expensive backing under a size budget (LRU)."""

    def __init__(self, D: HaarMultiplier2D, max_floats: int = 1 << 25) -> None:
        self.D = D
        self.max_level_first, self.max_level_second = D.max_level_first, D.max_level_second
        self._store: OrderedDict = OrderedDict()
        self._size = 0
        self.max_floats = max_floats

    @property
    def kind(self) -> str:
        return self.D.kind

    @property
    def exact(self) -> bool:
        return self.D.exact

    def _check(self, i, j) -> None:
        self.D._check(i, j)

    def _block(self, i: int, j: int) -> np.ndarray:
        key = (i, j)
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            return hit
        blk = self.D.block(i, j)
        if blk.size <= self.max_floats:
            self._store[key] = blk
            self._size += blk.size
            while self._size > self.max_floats:
                _, old = self._store.popitem(last=False)
                self._size -= old.size
        return blk

    def entries(self, rows, cols):
        return self.D.entries(rows, cols)

    def aggregate(self, i, j, row_labels, n_rows, col_labels, n_cols):
        if self.D.kind in ("level", "dense"):
            return self.D.aggregate(i, j, row_labels, n_rows, col_labels, n_cols)
        self._check(i, j)
        return _group_sum(self._block(i, j), np.asarray(row_labels), n_rows, np.asarray(col_labels), n_cols)

    def e_avg(self, i, j):
        return self.D.e_avg(i, j)

    def sup_norm(self):
        return self.D.sup_norm()


def _as_cached(D: HaarMultiplier2D) -> HaarMultiplier2D:
    return D if isinstance(D, _BlockCache) else _BlockCache(D)


@dataclass
class _EngineState:
    m: list
    n: list
    lab_h: list
    lab_k: list
    sg_h: list
    sg_k: list


class _Engine:
    """One stabilization attempt schedule: frequencies and signs, level by level."""

    def __init__(self, D, a, eta, delta, checks, limit_first, limit_second, rng, retry_limit, stage):
        self.D, self.a, self.eta, self.delta = D, a, eta, delta
        self.checks = set(checks)
        self.lf, self.ls = limit_first, limit_second
        self.rng, self.retry_limit, self.stage = rng, retry_limit, stage
        self.capped = not D.exact
        self.retries = 0

    def _fits(self, m_last: int, k_next: int) -> bool:
        """Whether m_{k_next} = m_last still leaves room for the minimal tail of the schedule."""
        m_final = m_last + 2 * (self.a - k_next)
        n_final = m_final + 1
        if m_final > self.lf or n_final > self.ls:
            return False
        return not (self.capped and m_final + n_final > SEEDED_BLOCK_CAP)

    def min_offset_fits(self, offset: int) -> bool:
        return self._fits(offset + 1, 0)

    def _dt(self, st: _EngineState, i: int, j: int, lab_h=None, lab_k=None) -> np.ndarray:
        mi, nj = st.m[i], st.n[j]
        lh = st.lab_h[i] if lab_h is None else lab_h
        lk = st.lab_k[j] if lab_k is None else lab_k
        sums = self.D.aggregate(mi, nj, lh, 1 << i, lk, 1 << j)
        return np.ldexp(sums, -(mi - i) - (nj - j))

    def _draw(self, size):
        return self.rng.choice([-1.0, 1.0], size=size)

    def _k_step(self, st: _EngineState, k: int, memo: dict) -> tuple[np.ndarray, np.ndarray] | None:
        """Signs for k~ at level k; returns (signs, labels at level k+1) or None."""
        gap = st.n[k + 1] - st.n[k]
        sg = self._draw(1 << st.n[k])
        for _ in range(self.retry_limit):
            lab = propagate_labels(st.lab_k[k], sg, gap)
            bad = np.zeros(1 << k, dtype=bool)
            if "upper" in self.checks:
                for i in range(min(k, len(st.m))):
                    old = memo_dt(self, st, memo, i, k)
                    new = self._dt(st, i, k + 1, lab_k=lab)
                    g = _gap(old, new, False, True)
                    bad |= (g > self.eta(i, k)).any(axis=(0, 1, 3))
            if "superdiagonal" in self.checks and k >= 1 and k < len(st.m):
                old = memo_dt(self, st, memo, k - 1, k)
                new = self._dt(st, k, k + 1, lab_k=lab)
                g = _gap(old, new, True, True)
                bad |= (g > self.eta(k - 1, k)).any(axis=(0, 1, 3)).reshape(-1)
            if "balancing" in self.checks and k == 0:
                r = self._dt(st, 0, 1, lab_k=lab)
                bad |= abs(float(r[0, 0] - r[0, 1])) > self.delta
            if not bad.any():
                return sg, lab
            self.retries += 1
            redo = bad[st.lab_k[k]]
            sg[redo] = self._draw(int(redo.sum()))
        return None

    def _h_step(self, st: _EngineState, k: int, memo: dict) -> tuple[np.ndarray, np.ndarray] | None:
        gap = st.m[k + 1] - st.m[k]
        sg = self._draw(1 << st.m[k])
        for _ in range(self.retry_limit):
            lab = propagate_labels(st.lab_h[k], sg, gap)
            bad = np.zeros(1 << k, dtype=bool)
            if "lower" in self.checks:
                for j in range(k + 1):
                    old = memo_dt(self, st, memo, k, j)
                    new = self._dt(st, k + 1, j, lab_h=lab)
                    g = _gap(old, new, True, False)
                    bad |= (g > self.eta(k, j)).any(axis=(1, 2, 3))
            if "diagonal" in self.checks:
                old = memo_dt(self, st, memo, k, k)
                new = self._dt(st, k + 1, k + 1, lab_h=lab)
                g = _gap(old, new, True, True)
                bad |= (g > self.eta(k, k)).any(axis=(1, 2, 3))
            if not bad.any():
                return sg, lab
            self.retries += 1
            redo = bad[st.lab_h[k]]
            sg[redo] = self._draw(int(redo.sum()))
        return None

    def run(self, offset: int) -> tuple[FaithfulHaarSystem, FaithfulHaarSystem] | None:
        a = self.a
        st = _EngineState(
            m=[offset + 1],
            n=[offset],
            lab_h=[np.zeros(1 << (offset + 1), dtype=np.int64)],
            lab_k=[np.zeros(1 << offset, dtype=np.int64)],
            sg_h=[],
            sg_k=[],
        )
        memo: dict = {}
        for k in range(a + 1):
            placed = False
            g = 1
            while True:
                n_next = st.m[k] + g
                if k < a:
                    m_next = st.m[k] + 2 * g
                    if not self._fits(m_next, k + 1):
                        break
                else:
                    if n_next > self.ls or (self.capped and st.m[k] + n_next > SEEDED_BLOCK_CAP):
                        break
                st.n.append(n_next)
                if k < a:
                    st.m.append(m_next)
                res_k = self._k_step(st, k, memo)
                res_h = None
                if res_k is not None:
                    st.sg_k.append(res_k[0])
                    st.lab_k.append(res_k[1])
                    if k < a:
                        res_h = self._h_step(st, k, memo)
                        if res_h is not None:
                            st.sg_h.append(res_h[0])
                            st.lab_h.append(res_h[1])
                            placed = True
                        else:
                            st.sg_k.pop()
                            st.lab_k.pop()
                    else:
                        placed = True
                if placed:
                    break
                st.n.pop()
                if k < a:
                    st.m.pop()
                _forget(memo, k + 1)
                g += 1
            if not placed:
                return None
        st.sg_h.append(self._draw(1 << st.m[a]))
        st.sg_k.append(self._draw(1 << st.n[a + 1]))
        H = FaithfulHaarSystem.from_label_arrays(st.m, st.lab_h, st.sg_h)
        K = FaithfulHaarSystem.from_label_arrays(st.n, st.lab_k, st.sg_k)
        return H, K


def memo_dt(engine: _Engine, st: _EngineState, memo: dict, i: int, j: int) -> np.ndarray:
    """Committed restricted block (i, j); valid while levels <= max(i, j) stay fixed."""
    hit = memo.get((i, j))
    if hit is None:
        hit = engine._dt(st, i, j)
        memo[(i, j)] = hit
    return hit


def _forget(memo: dict, level: int) -> None:
    for key in [key for key in memo if max(key) >= level]:
        del memo[key]


def _trivial_pair(a: int) -> tuple[FaithfulHaarSystem, FaithfulHaarSystem]:
    return FaithfulHaarSystem.trivial(a), FaithfulHaarSystem.trivial(a + 1)


def stabilize_stage(
    D: HaarMultiplier2D,
    stage: str,
    eta: EtaSchedule,
    config: StabilizeConfig,
    depth: int | None = None,
    rng: np.random.Generator | None = None,
    start_offset: int = 0,
    stats: dict | None = None,
) -> tuple[FaithfulHaarSystem, FaithfulHaarSystem]:
    """Systems (H~ of depth a, K~ of depth a+1) making D|_{H~ (x) K~} satisfy the stage's
    conditions up to level a-1; a defaults to outputDepth + 1.  Trivial systems are
    returned when the conditions already hold."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    checks = STAGES[stage]
    a = config.output_depth + 1 if depth is None else depth
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if D.max_level_first >= a and D.max_level_second >= a + 1:
        view = check_conditions(D, eta, config.delta_balance, a - 1)
        if view.passes(checks):
            return _trivial_pair(a)
    limit_first = min(D.max_level_first, config.frequency_budget)
    limit_second = min(D.max_level_second, config.frequency_budget)
    base = _as_cached(D)
    engine = _Engine(
        base, a, eta, config.delta_balance, checks, limit_first, limit_second, rng, config.retry_limit, stage
    )
    if not engine.min_offset_fits(start_offset):
        need = 2 * a + 1 + start_offset
        if isinstance(D, RestrictedMultiplier) and need > D.max_level_first:
            raise InsufficientDepth(f"input depth too small; need first-coordinate levels >= {need}", stage, need)
        raise FrequencyBudgetExhausted("no interleaved schedule fits the frequency budget", stage)
    offset = start_offset
    try:
        while engine.min_offset_fits(offset):
            out = engine.run(offset)
            if out is not None:
                return out
            offset += 1
    finally:
        if stats is not None:
            stats["retries"] = stats.get("retries", 0) + engine.retries
    raise FrequencyBudgetExhausted("no admissible signs within the frequency budget", stage)


# -- full pipeline --------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaMuTransport:
    """lambda/mu of the input at the level pairs that the output's (K, K+1) pair maps to."""

    lambda_: float
    mu: float
    lambda_levels: tuple[int, int]
    mu_levels: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "lambda": self.lambda_,
            "mu": self.mu,
            "lambdaLevels": list(self.lambda_levels),
            "muLevels": list(self.mu_levels),
        }


@dataclass
class StabilizeResult:
    H: FaithfulHaarSystem
    K: FaithfulHaarSystem
    D_tilde: DenseMultiplier
    report: ConditionReport
    lambda_mu_in: LambdaMuTransport
    lambda_mu_out: LambdaMu
    retries_used: int
    transport_error: float
    residual_t2s: float
    residual_t2: float
    proximity_bound: float
    proximity_pass: bool
    stage_systems: dict = field(default_factory=dict)
    root_gap: float | None = None
    root_gap_pass: bool | None = None

    def residual(self) -> HaarMultiplier2D:
        return residual_multiplier(self.D_tilde, self.lambda_mu_out.lambda_, self.lambda_mu_out.mu)

    def to_json(self) -> dict:
        return {
            "H": self.H.to_json(),
            "K": self.K.to_json(),
            "Dtilde": self.D_tilde.to_json(),
            "report": self.report.to_json(),
            "lambdaMuIn": self.lambda_mu_in.to_json(),
            "lambdaMuOut": self.lambda_mu_out.to_json(),
            "retriesUsed": self.retries_used,
            "transportMaxError": self.transport_error,
            "proximity": {
                "residualT2S": self.residual_t2s,
                "residualT2": self.residual_t2,
                "bound": self.proximity_bound,
                "pass": self.proximity_pass,
            },
            "rootToLambda": {"gap": self.root_gap, "pass": self.root_gap_pass},
        }


def residual_multiplier(D_tilde: HaarMultiplier2D, lam: float, mu: float) -> HaarMultiplier2D:
    """D~ - (lambda C + mu (Id - C))."""
    lf, ls = D_tilde.max_level_first, D_tilde.max_level_second
    C, Id = capon(lf, ls), identity(lf, ls)
    return LinearCombination([(1.0, D_tilde), (-(lam - mu), C), (-mu, Id)])


def _transport_error(D: HaarMultiplier2D, Dt: HaarMultiplier2D, H, K) -> float:
    return max(
        abs(Dt.e_avg(i, j) - D.e_avg(H.frequencies[i], K.frequencies[j]))
        for i in range(H.depth + 1)
        for j in range(K.depth + 1)
    )


def stabilize_full(
    D: HaarMultiplier2D, eta: EtaSchedule, config: StabilizeConfig
) -> StabilizeResult:
    """Triangular, superdiagonal, diagonal and balancing stages composed by *, then verified."""
    K_out = config.output_depth
    a_out = K_out + 1
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(len(STAGE_ORDER))]
    base = _as_cached(D)
    stats: dict = {}
    start_offset = 0
    targets = {s: a_out for s in STAGE_ORDER}
    last_error: StabilizationError | None = None
    for _ in range(config.pipeline_attempts):
        current: HaarMultiplier2D = base
        pairs = {}
        try:
            for idx, stage in enumerate(STAGE_ORDER):
                H_s, K_s = stabilize_stage(
                    current,
                    stage,
                    eta,
                    config,
                    depth=targets[stage],
                    rng=rngs[idx],
                    start_offset=start_offset if idx == 0 else 1,
                    stats=stats,
                )
                pairs[stage] = (H_s, K_s)
                current = RestrictedMultiplier(current, H_s, K_s)
        except InsufficientDepth as exc:
            last_error = exc
            pos = STAGE_ORDER.index(exc.stage)
            deeper = {s: max(targets[s], exc.need) for s in STAGE_ORDER[:pos]}
            if 2 * deeper[STAGE_ORDER[0]] + 2 + start_offset <= config.frequency_budget:
                targets.update(deeper)
            else:
                targets = {s: a_out for s in STAGE_ORDER}
                start_offset += 1
            continue
        H_tot, K_tot = pairs[STAGE_ORDER[0]]
        for stage in STAGE_ORDER[1:]:
            H_tot = compose(pairs[stage][0], H_tot)
            K_tot = compose(pairs[stage][1], K_tot)
        Dt = restrict_multiplier(base, H_tot, K_tot)
        report = check_conditions(Dt, eta, config.delta_balance, K_out)
        if not report.passed:
            last_error = StabilizationFailed("composed systems violate a condition", report)
            start_offset = _first_frequency(pairs) + 1
            targets = {s: a_out for s in STAGE_ORDER}
            continue
        return _finish(D, base, Dt, H_tot, K_tot, report, eta, config, stats, pairs)
    if last_error is None:
        raise StabilizationError("no pipeline attempt was made")
    raise last_error


def _first_frequency(pairs: dict) -> int:
    return pairs[STAGE_ORDER[0]][1].frequencies[0]


def _finish(D, base, Dt, H, K, report, eta, config, stats, pairs) -> StabilizeResult:
    K_out = config.output_depth
    lm_out = lambda_mu(Dt, K_out, K_out + 1)
    lam_levels = (H.frequencies[K_out + 1], K.frequencies[K_out])
    mu_levels = (H.frequencies[K_out], K.frequencies[K_out + 1])
    lm_in = LambdaMuTransport(base.e_avg(*lam_levels), base.e_avg(*mu_levels), lam_levels, mu_levels)
    R = residual_multiplier(Dt, lm_out.lambda_, lm_out.mu)
    rep = t2_variation(R)
    bound = eta.proximity_bound(K_out) + config.delta_balance
    root_gap = root_pass = None
    top = min(D.max_level_first, D.max_level_second)
    if D.exact and top >= 2:
        lo, hi = max(0, top - 3), top
        try:
            conv = lambda_mu(base, lo, hi)
        except LevelOverflow:
            conv = None
        if conv is not None and conv.converged:
            root_gap = abs(float(Dt.block(0, 0)[0, 0]) - conv.lambda_)
            root_pass = bool(root_gap < config.delta_balance)
    return StabilizeResult(
        H=H,
        K=K,
        D_tilde=Dt,
        report=report,
        lambda_mu_in=lm_in,
        lambda_mu_out=lm_out,
        retries_used=int(stats.get("retries", 0)),
        transport_error=_transport_error(base, Dt, H, K),
        residual_t2s=rep.t2s_semi_norm,
        residual_t2=rep.t2_norm,
        proximity_bound=bound,
        proximity_pass=bool(rep.t2_norm <= bound + 1e-12),
        stage_systems=pairs,
        root_gap=root_gap,
        root_gap_pass=root_pass,
    )
