"""Test vectors that witness unboundedness of the Capon projection, and end-to-end
verification of the stabilization factorization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dyadic import GridTooCoarse
from .multipliers import HaarMultiplier2D, apply_multiplier, capon_apply, t2_variation, VariationReport
from .spaces import HaarCoefficients2D, NormEstimate, ZSpaceSpec, z_norm
from .stabilizer import EtaSchedule, StabilizeConfig, StabilizeResult, stabilize_full

__all__ = [
    "FAMILIES",
    "ProbeFamilySpec",
    "ProbeRow",
    "ProbeReport",
    "build_probe",
    "probe_capon",
    "FactorReport",
    "check_factorization",
]

FAMILIES = ("l1-row", "linf-row")


@dataclass(frozen=True)
class ProbeFamilySpec:
    """One probe vector.  ``swap`` exchanges the roles of the two coordinates."""

    family: str
    n: int
    z_spec: ZSpaceSpec
    coefficients: tuple[float, ...] | None = None
    grid_depth: int | None = None
    samples: int = 2000
    seed: int = 0
    method: str = "auto"
    swap: bool = False

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown probe family {self.family!r}; expected one of {', '.join(FAMILIES)}")
        if self.n < 0 or (self.family == "linf-row" and self.n < 1):
            raise ValueError(f"n={self.n} is out of range for {self.family}")
        if self.coefficients is not None:
            if self.family != "l1-row":
                raise ValueError("coefficients apply to the l1-row family only")
            if len(self.coefficients) != self.n + 1:
                raise ValueError(f"l1-row needs n+1 = {self.n + 1} coefficients, got {len(self.coefficients)}")
        if self.grid_depth is not None and self.grid_depth < self.min_grid_depth:
            raise GridTooCoarse(f"grid depth {self.grid_depth} < {self.min_grid_depth} required for {self.family}")

    @property
    def min_grid_depth(self) -> int:
        return self.n + 2 if self.family == "l1-row" else 2 * self.n + 2

    @property
    def effective_grid(self) -> int:
        return self.min_grid_depth if self.grid_depth is None else self.grid_depth

    @property
    def a(self) -> np.ndarray:
        return np.ones(self.n + 1) if self.coefficients is None else np.asarray(self.coefficients, dtype=float)


def _level_iotas(level: int) -> np.ndarray:
    return np.arange(1 << level, 1 << (level + 1), dtype=np.int64)


def build_probe(spec: ProbeFamilySpec) -> HaarCoefficients2D:
    """l1-row: f (x) g with f = sum_{k<=n} 2^k h_{[0,2^-k)}, g = sum_{l<=n} a_l r_l.
    linf-row: sum_{k=1}^n (h_{[0,2^-2k)} - h_{[0,2^-(2k-1))}) (x) r_{2k}.
    r_l is the sum of all level-l Haar functions."""
    n = spec.n
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    if spec.family == "l1-row":
        a = spec.a
        for k in range(n + 1):
            for l in range(n + 1):
                if a[l] == 0:
                    continue
                J = _level_iotas(l)
                rows.append(np.full(J.size, 1 << k, dtype=np.int64))
                cols.append(J)
                vals.append(np.full(J.size, float(2**k) * a[l]))
        top_first = top_second = n
    else:
        for k in range(1, n + 1):
            J = _level_iotas(2 * k)
            for lev, sign in ((2 * k, 1.0), (2 * k - 1, -1.0)):
                rows.append(np.full(J.size, 1 << lev, dtype=np.int64))
                cols.append(J)
                vals.append(np.full(J.size, sign))
        top_first = top_second = 2 * n
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    v = np.concatenate(vals) if vals else np.zeros(0)
    if spec.swap:
        r, c = c, r
    return HaarCoefficients2D(top_first, top_second, r, c, v)


@dataclass(frozen=True)
class ProbeRow:
    n: int
    capon_norm: NormEstimate
    norm: NormEstimate
    ratio: float
    ratio_std_error: float

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "caponNorm": self.capon_norm.value,
            "norm": self.norm.value,
            "ratio": self.ratio,
            "stdErrors": {
                "caponNorm": self.capon_norm.std_error,
                "norm": self.norm.std_error,
                "ratio": self.ratio_std_error,
            },
            "method": self.norm.method,
        }


@dataclass(frozen=True)
class ProbeReport:
    family: str
    space: str
    swap: bool
    rows: tuple[ProbeRow, ...]
    growth_fit: float

    def ratio(self, n: int) -> ProbeRow:
        for row in self.rows:
            if row.n == n:
                return row
        raise KeyError(n)

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "space": self.space,
            "swap": self.swap,
            "ratios": [r.to_json() for r in self.rows],
            "growthFit": self.growth_fit,
        }

    def csv_rows(self) -> tuple[list[str], list[list]]:
        header = ["n", "caponNorm", "norm", "ratio", "caponNormStdError", "normStdError", "ratioStdError"]
        body = [
            [r.n, r.capon_norm.value, r.norm.value, r.ratio, r.capon_norm.std_error, r.norm.std_error, r.ratio_std_error]
            for r in self.rows
        ]
        return header, body


def _ratio(num: NormEstimate, den: NormEstimate) -> tuple[float, float]:
    if den.value == 0:
        return (0.0, 0.0) if num.value == 0 else (math.inf, math.inf)
    q = num.value / den.value
    if q == 0:
        return 0.0, num.std_error / den.value
    rel = math.hypot(num.std_error / num.value, den.std_error / den.value)
    return q, q * rel


def growth_slope(ns: Sequence[int], ratios: Sequence[float]) -> float:
    """Least-squares slope of log ratio against log n over n >= 1 with positive ratio."""
    pts = [(math.log(n), math.log(r)) for n, r in zip(ns, ratios) if n >= 1 and 0 < r < math.inf]
    if len(pts) < 2:
        return float("nan")
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


def probe_capon(
    family: str,
    z_spec: ZSpaceSpec,
    n_range: Sequence[int],
    coefficients: Sequence[float] | None = None,
    samples: int = 2000,
    seed: int = 0,
    method: str = "auto",
    swap: bool = False,
    grid_depth: int | None = None,
) -> ProbeReport:
    """||C z|| and ||z|| for the probe family across ``n_range``.  Explicit coefficients
    (l1-row) must have length max(n)+1; each n uses the first n+1 of them."""
    rows = []
    for n in n_range:
        coeffs = None if coefficients is None else tuple(coefficients[: n + 1])
        spec = ProbeFamilySpec(family, n, z_spec, coeffs, grid_depth, samples, seed, method, swap)
        z = build_probe(spec)
        grid = spec.effective_grid
        kw = dict(grid_depth=grid, method=method, samples=samples, seed=seed)
        norm = z_norm(z, z_spec, **kw)
        cnorm = z_norm(capon_apply(z), z_spec, **kw)
        q, se = _ratio(cnorm, norm)
        rows.append(ProbeRow(n, cnorm, norm, q, se))
    fit = growth_slope([r.n for r in rows], [r.ratio for r in rows])
    return ProbeReport(family, str(z_spec), swap, tuple(rows), fit)


@dataclass
class FactorReport:
    result: StabilizeResult
    variation: VariationReport
    proximity_bound: float
    balancing_residue: float
    empirical_ratios: list[float] = field(default_factory=list)
    passed: bool = False

    def to_json(self) -> dict:
        return {
            "lambda": self.result.lambda_mu_out.lambda_,
            "mu": self.result.lambda_mu_out.mu,
            "frequencies": {"H": list(self.result.H.frequencies), "K": list(self.result.K.frequencies)},
            "residualVariation": self.variation.to_json(),
            "proximityBound": self.proximity_bound,
            "balancingResidue": self.balancing_residue,
            "empiricalRatios": self.empirical_ratios,
            "maxEmpiricalRatio": max(self.empirical_ratios, default=0.0),
            "retriesUsed": self.result.retries_used,
            "pass": self.passed,
        }


def _random_vector(lf: int, ls: int, rng: np.random.Generator, terms: int) -> HaarCoefficients2D:
    rows = rng.integers(1, 1 << (lf + 1), size=terms)
    cols = rng.integers(1, 1 << (ls + 1), size=terms)
    vals = rng.standard_normal(terms)
    return HaarCoefficients2D(lf, ls, rows, cols, vals)


def check_factorization(
    D: HaarMultiplier2D,
    eta: EtaSchedule,
    config: StabilizeConfig,
    z_spec: ZSpaceSpec,
    trials: int = 20,
    samples: int = 500,
    terms: int = 8,
) -> FactorReport:
    """Stabilize D, form R = D~ - (lambda C + mu (Id - C)), and measure it.

    Passes when t2sSemiNorm(R) <= sum_{i,j<=K} (i+j+4) eta_{i,j} and the balancing
    residue |d~_{root,[0,1/2)} - d~_{root,[1/2,1)}| <= delta."""
    result = stabilize_full(D, eta, config)
    R = result.residual()
    variation = t2_variation(R)
    bound = eta.proximity_bound(config.output_depth)
    top = result.D_tilde.block(0, 1)
    residue = abs(float(top[0, 0] - top[0, 1]))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    ratios = []
    for t in range(trials):
        z = _random_vector(R.max_level_first, R.max_level_second, rng, terms)
        base = z_norm(z, z_spec, samples=samples, seed=config.seed + t)
        image = z_norm(apply_multiplier(R, z), z_spec, samples=samples, seed=config.seed + t)
        ratios.append(image.value / base.value if base.value > 0 else 0.0)
    passed = bool(variation.t2s_semi_norm <= bound + 1e-12 and residue <= config.delta_balance)
    return FactorReport(result, variation, bound, residue, ratios, passed)
