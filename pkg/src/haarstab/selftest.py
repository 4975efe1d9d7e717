"""Quick oracle checks run by ``haarstab selftest``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .faithful import (
    compose,
    distribution_preserved,
    operator_A,
    operator_B,
    random_faithful_system,
    restrict_multiplier,
    validate,
)
from .multipliers import DenseMultiplier, capon, lambda_mu
from .oracles import iota_roundtrip, restriction_by_inner_products, sign_pattern_oracle
from .dyadic import haar_step, intervals_upto
from .spaces import HaarCoefficients2D, ZSpaceSpec, square_surrogate_norm, z_norm

__all__ = ["CheckResult", "run_selftest"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def to_json(self) -> dict:
        return {"name": self.name, "pass": self.passed, "detail": self.detail}


def _random_vector(lf: int, ls: int, rng: np.random.Generator, terms: int) -> HaarCoefficients2D:
    rows = rng.integers(1, 1 << (lf + 1), size=terms)
    cols = rng.integers(1, 1 << (ls + 1), size=terms)
    return HaarCoefficients2D(lf, ls, rows, cols, rng.standard_normal(terms))


def _iota(rng) -> CheckResult:
    ok = iota_roundtrip(10)
    patterns = all(
        np.array_equal(haar_step(I, 7).values, sign_pattern_oracle(I, 7)) for I in intervals_upto(6)
    )
    return CheckResult("iota-and-haar-patterns", ok and patterns, "levels <= 10, patterns on grid 7")


def _ab(rng) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        H = random_faithful_system(3, rng, max_frequency=7)
        K = random_faithful_system(3, rng, max_frequency=7)
        z = _random_vector(3, 3, rng, 12)
        worst = max(worst, operator_A(H, K, operator_B(H, K, z)).max_abs_diff(z))
    return CheckResult("A-after-B", worst <= 1e-12, f"max deviation {worst:.3e}")


def _distribution(rng) -> CheckResult:
    ok = True
    for _ in range(20):
        H = random_faithful_system(3, rng, max_frequency=8)
        coeffs = [rng.integers(-3, 4, size=1 << k).astype(float) for k in range(4)]
        ok &= distribution_preserved(H, coeffs)
    return CheckResult("distribution", bool(ok), "20 random systems at depth 3")


def _restriction(rng) -> CheckResult:
    worst = 0.0
    for _ in range(3):
        D = DenseMultiplier.random(6, 6, rng)
        H = random_faithful_system(2, rng, max_frequency=6)
        K = random_faithful_system(2, rng, max_frequency=6)
        fast = restrict_multiplier(D, H, K)
        slow = restriction_by_inner_products(D, H, K)
        worst = max(worst, max(float(np.abs(fast.block(*key) - blk).max()) for key, blk in slow.items()))
    return CheckResult("restriction-oracle", worst <= 1e-10, f"max deviation {worst:.3e}")


def _monoid(rng) -> CheckResult:
    worst = 0.0
    valid = True
    for _ in range(5):
        D = DenseMultiplier.random(9, 9, rng)
        H1 = random_faithful_system(5, rng, max_frequency=9)
        K1 = random_faithful_system(5, rng, max_frequency=9)
        H2 = random_faithful_system(2, rng, max_frequency=5)
        K2 = random_faithful_system(2, rng, max_frequency=5)
        twice = restrict_multiplier(restrict_multiplier(D, H1, K1), H2, K2)
        H, K = compose(H2, H1), compose(K2, K1)
        valid &= not validate(H) and not validate(K)
        once = restrict_multiplier(D, H, K)
        worst = max(worst, max(float(np.abs(twice.block(i, j) - once.block(i, j)).max()) for i in range(3) for j in range(3)))
    return CheckResult("monoid-law", valid and worst <= 1e-10, f"max deviation {worst:.3e}")


def _capon(rng) -> CheckResult:
    lm = lambda_mu(capon(10, 10), 2, 9)
    ok = lm.lambda_ == 1.0 and lm.mu == 0.0 and lm.converged
    return CheckResult("capon-lambda-mu", ok, f"lambda={lm.lambda_}, mu={lm.mu}")


def _khintchine(rng) -> CheckResult:
    spec = ZSpaceSpec.parse("s11:L1:L1")
    ok = True
    for _ in range(5):
        z = _random_vector(2, 2, rng, 6)
        est = z_norm(z, spec, method="exact")
        sq = square_surrogate_norm(z, spec)
        ok &= 0.5 * sq <= est.value + 1e-12 and est.value <= sq + 1e-12
    return CheckResult("khintchine-sandwich", bool(ok), "5 random vectors, exact enumeration")


CHECKS: tuple[Callable[[np.random.Generator], CheckResult], ...] = (
    _iota,
    _ab,
    _distribution,
    _restriction,
    _monoid,
    _capon,
    _khintchine,
)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check(rng) for check in CHECKS]
