"""Haar system spaces X, Y and bi-parameter Haar system Hardy spaces Z(sigma, X, Y).

Functions in two variables are carried as coefficient maps (I, J) -> a_{I,J}
keyed by (iota(I), iota(J)).  Norms are evaluated on a dyadic grid in three
stages: expectation over the sign regime, Y-norm in t, X-norm in s.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dyadic import DyadicInterval, GridTooCoarse, StepFunction1D, StepFunction2D, from_iota
from .rng import rademacher

__all__ = [
    "HaarSystemSpaceSpec",
    "SignRegime",
    "ZSpaceSpec",
    "HaarCoefficients2D",
    "NormEstimate",
    "x_norm",
    "z_norm",
    "field_norm",
    "scalar_product",
    "square_surrogate_norm",
    "basis_matrix",
    "EXACT_THRESHOLD",
]

EXACT_THRESHOLD = 16
N_BATCHES = 10
_CHUNK_CELLS = 1 << 22


@dataclass(frozen=True)
class HaarSystemSpaceSpec:
    """Lp for finite p >= 1 (``p`` set) or Linf (``p`` is None)."""

    p: float | None = 1.0

    def __post_init__(self) -> None:
        if self.p is not None and not (self.p >= 1 and math.isfinite(self.p)):
            raise ValueError(f"Lp needs a finite p >= 1, got {self.p}; spell the sup norm as Linf")

    @property
    def is_linf(self) -> bool:
        return self.p is None

    @classmethod
    def parse(cls, text: str) -> "HaarSystemSpaceSpec":
        t = text.strip()
        if t.lower() == "linf":
            return cls(None)
        m = re.fullmatch(r"[Ll](\d+(?:\.\d+)?)", t)
        if not m:
            raise ValueError(f"cannot parse space {text!r}; expected L<p> or Linf")
        return cls(float(m.group(1)))

    def __str__(self) -> str:
        if self.p is None:
            return "Linf"
        return f"L{self.p:g}"

    def norm_rows(self, values: np.ndarray) -> np.ndarray:
        """Norm of each row (last axis) as a function on [0,1)."""
        a = np.abs(values)
        if self.p is None:
            return a.max(axis=-1)
        if self.p == 1:
            return a.mean(axis=-1)
        if self.p == 2:
            return np.sqrt((a * a).mean(axis=-1))
        return (a ** self.p).mean(axis=-1) ** (1.0 / self.p)


@dataclass(frozen=True)
class SignRegime:
    first_independent: bool
    second_independent: bool

    @property
    def code(self) -> str:
        return f"{int(self.first_independent)}{int(self.second_independent)}"

    @classmethod
    def from_code(cls, code: str) -> "SignRegime":
        if code not in ("00", "01", "10", "11"):
            raise ValueError(f"sign regime must be one of 00, 01, 10, 11, got {code!r}")
        return cls(code[0] == "1", code[1] == "1")

    @classmethod
    def all(cls) -> list["SignRegime"]:
        return [cls.from_code(c) for c in ("00", "01", "10", "11")]


@dataclass(frozen=True)
class ZSpaceSpec:
    regime: SignRegime
    X: HaarSystemSpaceSpec
    Y: HaarSystemSpaceSpec

    @classmethod
    def parse(cls, text: str) -> "ZSpaceSpec":
        m = re.fullmatch(r"s([01]{2}):([^:]+):([^:]+)", text.strip())
        if not m:
            raise ValueError(f"cannot parse space spec {text!r}; expected s<ab>:<X>:<Y>")
        return cls(
            SignRegime.from_code(m.group(1)),
            HaarSystemSpaceSpec.parse(m.group(2)),
            HaarSystemSpaceSpec.parse(m.group(3)),
        )

    def __str__(self) -> str:
        return f"s{self.regime.code}:{self.X}:{self.Y}"

    def mixed_norm(self, field: np.ndarray) -> float:
        """||s -> ||t -> field(s,t)||_Y||_X for a grid field."""
        return float(self.X.norm_rows(self.Y.norm_rows(field)))


class HaarCoefficients2D:
    """Finite coefficient map (I, J) -> a_{I,J}, stored as sorted parallel arrays.

    Zero coefficients are dropped and duplicates are summed on construction.
    """

    __slots__ = ("max_level_first", "max_level_second", "rows", "cols", "values")

    def __init__(
        self,
        max_level_first: int,
        max_level_second: int,
        rows: Sequence[int] | np.ndarray = (),
        cols: Sequence[int] | np.ndarray = (),
        values: Sequence[float] | np.ndarray = (),
    ) -> None:
        r = np.asarray(rows, dtype=np.int64).ravel()
        c = np.asarray(cols, dtype=np.int64).ravel()
        v = np.asarray(values, dtype=float).ravel()
        if not (r.shape == c.shape == v.shape):
            raise ValueError("rows, cols and values must have equal length")
        if r.size:
            if r.min() < 1 or c.min() < 1:
                raise ValueError("iota keys start at 1")
            if int(r.max()).bit_length() - 1 > max_level_first:
                raise ValueError(f"first-coordinate level exceeds maxLevelFirst={max_level_first}")
            if int(c.max()).bit_length() - 1 > max_level_second:
                raise ValueError(f"second-coordinate level exceeds maxLevelSecond={max_level_second}")
            width = np.int64(1) << np.int64(max_level_second + 1)
            key = r * width + c
            uniq, inv = np.unique(key, return_inverse=True)
            summed = grouped_sum(inv.ravel(), v, uniq.size)
            keep = summed != 0.0
            uniq, summed = uniq[keep], summed[keep]
            r, c, v = uniq // width, uniq % width, summed
        for arr in (r, c, v):
            arr.setflags(write=False)
        self.max_level_first = int(max_level_first)
        self.max_level_second = int(max_level_second)
        self.rows, self.cols, self.values = r, c, v

    # construction helpers
    @classmethod
    def from_mapping(
        cls,
        mapping: Mapping,
        max_level_first: int | None = None,
        max_level_second: int | None = None,
    ) -> "HaarCoefficients2D":
        rows, cols, vals = [], [], []
        for (a, b), val in mapping.items():
            rows.append(a.iota if isinstance(a, DyadicInterval) else int(a))
            cols.append(b.iota if isinstance(b, DyadicInterval) else int(b))
            vals.append(float(val))
        lf = max((r.bit_length() - 1 for r in rows), default=0)
        ls = max((c.bit_length() - 1 for c in cols), default=0)
        return cls(
            lf if max_level_first is None else max_level_first,
            ls if max_level_second is None else max_level_second,
            rows,
            cols,
            vals,
        )

    @classmethod
    def single(cls, I: DyadicInterval, J: DyadicInterval, value: float = 1.0) -> "HaarCoefficients2D":
        return cls(I.level, J.level, [I.iota], [J.iota], [value])

    @classmethod
    def zero(cls, max_level_first: int = 0, max_level_second: int = 0) -> "HaarCoefficients2D":
        return cls(max_level_first, max_level_second)

    # accessors
    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def entries(self) -> dict[tuple[int, int], float]:
        return {(int(a), int(b)): float(v) for a, b, v in zip(self.rows, self.cols, self.values)}

    def get(self, I: DyadicInterval | int, J: DyadicInterval | int) -> float:
        a = I.iota if isinstance(I, DyadicInterval) else int(I)
        b = J.iota if isinstance(J, DyadicInterval) else int(J)
        hit = np.nonzero((self.rows == a) & (self.cols == b))[0]
        return float(self.values[hit[0]]) if hit.size else 0.0

    @property
    def row_levels(self) -> np.ndarray:
        return _levels(self.rows)

    @property
    def col_levels(self) -> np.ndarray:
        return _levels(self.cols)

    def present_levels(self) -> tuple[int, int]:
        """Deepest first/second levels actually carrying a coefficient (-1 if empty)."""
        if not len(self):
            return -1, -1
        return int(self.row_levels.max()), int(self.col_levels.max())

    def with_levels(self, max_level_first: int, max_level_second: int) -> "HaarCoefficients2D":
        return HaarCoefficients2D(max_level_first, max_level_second, self.rows, self.cols, self.values)

    def mask(self, keep: np.ndarray) -> "HaarCoefficients2D":
        return HaarCoefficients2D(
            self.max_level_first, self.max_level_second, self.rows[keep], self.cols[keep], self.values[keep]
        )

    def scaled(self, factor: float) -> "HaarCoefficients2D":
        return HaarCoefficients2D(
            self.max_level_first, self.max_level_second, self.rows, self.cols, self.values * factor
        )

    def __add__(self, other: "HaarCoefficients2D") -> "HaarCoefficients2D":
        return HaarCoefficients2D(
            max(self.max_level_first, other.max_level_first),
            max(self.max_level_second, other.max_level_second),
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.cols, other.cols]),
            np.concatenate([self.values, other.values]),
        )

    def __sub__(self, other: "HaarCoefficients2D") -> "HaarCoefficients2D":
        return self + other.scaled(-1.0)

    def max_abs_diff(self, other: "HaarCoefficients2D") -> float:
        diff = self - other
        return float(np.abs(diff.values).max()) if len(diff) else 0.0

    def evaluate(self, grid_depth: int | None = None) -> StepFunction2D:
        """Pointwise values of sum a_{I,J} h_I(s) k_J(t) on the grid."""
        depth = self.default_grid_depth() if grid_depth is None else grid_depth
        self._check_grid(depth)
        u1, inv1 = np.unique(self.rows, return_inverse=True)
        u2, inv2 = np.unique(self.cols, return_inverse=True)
        A = np.zeros((u1.size, u2.size))
        A[inv1, inv2] = self.values
        vals = basis_matrix(u1, depth).T @ A @ basis_matrix(u2, depth)
        return StepFunction2D(depth, vals)

    def default_grid_depth(self) -> int:
        return max(self.max_level_first, self.max_level_second) + 1

    def _check_grid(self, depth: int) -> None:
        lf, ls = self.present_levels()
        if max(lf, ls) + 1 > depth:
            raise GridTooCoarse(f"grid depth {depth} cannot represent coefficients at level {max(lf, ls)}")

    # serialization
    def to_json(self) -> dict:
        return {
            "maxLevelFirst": self.max_level_first,
            "maxLevelSecond": self.max_level_second,
            "entries": [[int(a), int(b), float(v)] for a, b, v in zip(self.rows, self.cols, self.values)],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "HaarCoefficients2D":
        try:
            lf = int(data["maxLevelFirst"])
            ls = int(data["maxLevelSecond"])
            raw = data["entries"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"vector JSON is missing field {exc}") from None
        rows, cols, vals = [], [], []
        for n, item in enumerate(raw):
            if not isinstance(item, (list, tuple)) or len(item) != 3:
                raise ValueError(f"entries[{n}] must be [iotaI, iotaJ, a]")
            rows.append(int(item[0]))
            cols.append(int(item[1]))
            vals.append(float(item[2]))
        return cls(lf, ls, rows, cols, vals)

    def __repr__(self) -> str:
        return (
            f"HaarCoefficients2D(levels=({self.max_level_first},{self.max_level_second}), "
            f"terms={len(self)})"
        )



def grouped_sum(groups: np.ndarray, values: np.ndarray, n_groups: int) -> np.ndarray:
    """Sum ``values`` per group label by pairwise (tree) reduction.

    Rounding error grows like log(group size) instead of linearly, which keeps
    large merges (e.g. collapsing an expanded faithful system) at machine precision."""
    order = np.argsort(groups, kind="stable")
    g, x = groups[order], values[order].astype(float, copy=True)
    while x.size > n_groups:
        starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
        pos = np.arange(g.size) - np.repeat(starts, np.diff(np.r_[starts, g.size]))
        even = pos % 2 == 0
        paired = even[:-1] & (g[1:] == g[:-1])
        x[:-1][paired] += x[1:][paired]
        g, x = g[even], x[even]
    out = np.zeros(n_groups)
    out[g] = x
    return out

def _levels(iotas: np.ndarray) -> np.ndarray:
    if iotas.size == 0:
        return np.zeros(0, dtype=np.int64)
    # floor(log2) for positive int64, exact for all levels used here
    return np.frexp(iotas.astype(np.float64))[1].astype(np.int64) - 1


def basis_matrix(iotas: np.ndarray, grid_depth: int) -> np.ndarray:
    """Rows are h_I sampled on D_grid_depth, one per iota in ``iotas``."""
    iotas = np.asarray(iotas, dtype=np.int64)
    out = np.zeros((iotas.size, 1 << grid_depth))
    for n, code in enumerate(iotas):
        I = from_iota(int(code))
        if I.level + 1 > grid_depth:
            raise GridTooCoarse(f"h_I at level {I.level} needs grid depth >= {I.level + 1}")
        half = 1 << (grid_depth - I.level - 1)
        start = I.index * 2 * half
        out[n, start : start + half] = 1.0
        out[n, start + half : start + 2 * half] = -1.0
    return out


@dataclass(frozen=True)
class NormEstimate:
    value: float
    std_error: float
    method: str
    samples: int

    def to_json(self) -> dict:
        return {"value": self.value, "stdError": self.std_error, "method": self.method, "samples": self.samples}


def x_norm(f: StepFunction1D, X: HaarSystemSpaceSpec) -> float:
    return float(X.norm_rows(f.values))


# -- expectation over signs ---------------------------------------------------------


@dataclass
class _Term:
    coeffs: HaarCoefficients2D
    weight: np.ndarray | None  # pointwise factor on the grid, or None for 1


def _sign_matrix_exact(n_vars: int) -> np.ndarray:
    """All sign patterns with the first variable pinned to +1 (global flip symmetry)."""
    if n_vars == 0:
        return np.ones((1, 0))
    codes = np.arange(1 << (n_vars - 1), dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n_vars - 1, dtype=np.int64)[None, :]) & 1
    signs = 1.0 - 2.0 * bits.astype(float)
    return np.hstack([np.ones((codes.size, 1)), signs])


class _FieldEvaluator:
    """Evaluates sum_r W_r * sum sigma_I tau_J a^r_{IJ} h_I(s) k_J(t) for batches of signs."""

    def __init__(self, terms: Sequence[_Term], grid_depth: int) -> None:
        self.depth = grid_depth
        rows = np.unique(np.concatenate([t.coeffs.rows for t in terms])) if terms else np.zeros(0, np.int64)
        cols = np.unique(np.concatenate([t.coeffs.cols for t in terms])) if terms else np.zeros(0, np.int64)
        self.first_iotas, self.second_iotas = rows, cols
        self.H = basis_matrix(rows, grid_depth)
        self.K = basis_matrix(cols, grid_depth)
        self.mats = []
        self.weights = []
        for t in terms:
            A = np.zeros((rows.size, cols.size))
            A[np.searchsorted(rows, t.coeffs.rows), np.searchsorted(cols, t.coeffs.cols)] = t.coeffs.values
            self.mats.append(A)
            self.weights.append(t.weight)

    def fields(self, sigma: np.ndarray | None, tau: np.ndarray | None) -> np.ndarray:
        """Batch of fields, shape (B, 2^N, 2^N); ``None`` means all signs +1."""
        B = 1 if sigma is None and tau is None else (sigma if sigma is not None else tau).shape[0]
        side = 1 << self.depth
        out = np.zeros((B, side, side))
        for A, W in zip(self.mats, self.weights):
            if tau is None:
                M = np.broadcast_to(A @ self.K, (B, A.shape[0], side))
            else:
                M = np.einsum("ij,bj,jt->bit", A, tau, self.K, optimize=True)
            if sigma is None:
                F = np.einsum("is,bit->bst", self.H, M, optimize=True)
            else:
                F = np.einsum("bi,is,bit->bst", sigma, self.H, M, optimize=True)
            out += F if W is None else F * W[None]
        return out


def _n_sign_vars(ev: _FieldEvaluator, regime: SignRegime) -> int:
    return ev.first_iotas.size * regime.first_independent + ev.second_iotas.size * regime.second_independent


def _split_signs(signs: np.ndarray, ev: _FieldEvaluator, regime: SignRegime):
    n1 = ev.first_iotas.size if regime.first_independent else 0
    sigma = signs[:, :n1] if regime.first_independent else None
    tau = signs[:, n1:] if regime.second_independent else None
    return sigma, tau


def _mean_abs_field(ev: _FieldEvaluator, regime: SignRegime, signs: np.ndarray) -> np.ndarray:
    """Pointwise mean of |field| over the rows of ``signs`` (chunked)."""
    side = 1 << ev.depth
    chunk = max(1, _CHUNK_CELLS // (side * side))
    total = np.zeros((side, side))
    for start in range(0, signs.shape[0], chunk):
        sigma, tau = _split_signs(signs[start : start + chunk], ev, regime)
        total += np.abs(ev.fields(sigma, tau)).sum(axis=0)
    return total / signs.shape[0]


def _mc_signs(ev: _FieldEvaluator, regime: SignRegime, seed: int, first: int, count: int) -> np.ndarray:
    idx = np.arange(first, first + count, dtype=np.int64)[:, None]
    parts = []
    if regime.first_independent:
        parts.append(rademacher(seed, idx, ev.first_iotas[None, :], 1))
    if regime.second_independent:
        parts.append(rademacher(seed, idx, ev.second_iotas[None, :], 2))
    return np.hstack(parts) if parts else np.ones((count, 0))


def field_norm(
    terms: Sequence[tuple[HaarCoefficients2D, np.ndarray | None]],
    spec: ZSpaceSpec,
    grid_depth: int,
    method: str = "auto",
    samples: int = 2000,
    seed: int = 0,
    exact_threshold: int = EXACT_THRESHOLD,
) -> NormEstimate:
    """X(Y(L1(sigma))) norm of sum_r W_r(s,t) * (sigma-signed expansion of coefficients r).

    With a single unweighted term this is the Z norm.  Weighted terms realize
    pointwise multipliers acting after the isometric embedding into X(Y(L1)).
    """
    if method not in ("auto", "exact", "monte-carlo"):
        raise ValueError(f"unknown method {method!r}")
    wrapped = []
    for coeffs, weight in terms:
        coeffs._check_grid(grid_depth)
        if weight is not None and np.shape(weight) != (1 << grid_depth, 1 << grid_depth):
            raise ValueError("weight field does not match the grid")
        wrapped.append(_Term(coeffs, None if weight is None else np.asarray(weight, dtype=float)))
    regime = spec.regime
    ev = _FieldEvaluator(wrapped, grid_depth)
    n_vars = _n_sign_vars(ev, regime)

    if n_vars == 0 or method == "exact" or (method == "auto" and n_vars <= exact_threshold):
        if n_vars > 26:
            raise ValueError(f"exact enumeration over {n_vars} sign variables is not tractable")
        g = _mean_abs_field(ev, regime, _sign_matrix_exact(n_vars))
        return NormEstimate(spec.mixed_norm(g), 0.0, "exact-enumeration", 1 << max(n_vars - 1, 0))

    if samples < 1:
        raise ValueError("monte-carlo evaluation needs at least one sample")
    n_batches = min(N_BATCHES, samples)
    sizes = [samples // n_batches + (b < samples % n_batches) for b in range(n_batches)]
    side = 1 << grid_depth
    pooled = np.zeros((side, side))
    batch_norms = []
    first = 0
    for size in sizes:
        g = _mean_abs_field(ev, regime, _mc_signs(ev, regime, seed, first, size))
        batch_norms.append(spec.mixed_norm(g))
        pooled += g * size
        first += size
    pooled /= samples
    stderr = float(np.std(batch_norms, ddof=1) / math.sqrt(n_batches)) if n_batches > 1 else math.inf
    return NormEstimate(spec.mixed_norm(pooled), stderr, "monte-carlo", samples)


def z_norm(
    z: HaarCoefficients2D,
    spec: ZSpaceSpec,
    grid_depth: int | None = None,
    method: str = "auto",
    samples: int = 2000,
    seed: int = 0,
    exact_threshold: int = EXACT_THRESHOLD,
) -> NormEstimate:
    depth = z.default_grid_depth() if grid_depth is None else grid_depth
    return field_norm([(z, None)], spec, depth, method, samples, seed, exact_threshold)


def scalar_product(zprime: HaarCoefficients2D, z: HaarCoefficients2D) -> float:
    """sum a'_{IJ} a_{IJ} |I||J|, the L2 pairing of the two expansions."""
    width = np.int64(1) << np.int64(max(zprime.max_level_second, z.max_level_second) + 1)
    k1 = zprime.rows * width + zprime.cols
    k2 = z.rows * width + z.cols
    common, i1, i2 = np.intersect1d(k1, k2, return_indices=True)
    if common.size == 0:
        return 0.0
    weight = np.ldexp(1.0, -(_levels(z.rows[i2]) + _levels(z.cols[i2])).astype(int))
    return float(np.sum(zprime.values[i1] * z.values[i2] * weight))


def square_surrogate_norm(z: HaarCoefficients2D, spec: ZSpaceSpec, grid_depth: int | None = None) -> float:
    """Regime-appropriate (partial) square function norm in X(Y)."""
    regime = spec.regime
    if not (regime.first_independent or regime.second_independent):
        raise ValueError("no square function surrogate is defined for the regime s00")
    depth = z.default_grid_depth() if grid_depth is None else grid_depth
    z._check_grid(depth)
    u1, inv1 = np.unique(z.rows, return_inverse=True)
    u2, inv2 = np.unique(z.cols, return_inverse=True)
    A = np.zeros((u1.size, u2.size))
    A[inv1, inv2] = z.values
    H, K = basis_matrix(u1, depth), basis_matrix(u2, depth)
    if regime.first_independent and regime.second_independent:
        sq = (H * H).T @ (A * A) @ (K * K)
    elif regime.second_independent:
        inner = H.T @ A
        sq = (inner * inner) @ (K * K)
    else:
        inner = A @ K
        sq = (H * H).T @ (inner * inner)
    return spec.mixed_norm(np.sqrt(sq))
