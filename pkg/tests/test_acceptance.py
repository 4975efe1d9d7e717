"""Quantitative acceptance checks; each test records one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from haarstab.dyadic import DyadicInterval
from haarstab.faithful import (
    compose,
    distribution_preserved,
    operator_A,
    operator_B,
    random_faithful_system,
    restrict_multiplier,
)
from haarstab.multipliers import (
    DenseMultiplier,
    SeededMultiplier,
    SeededMultiplier1D,
    down_scale,
    pointwise_int_check,
    project_leq,
    pw_proximity_check,
    sub_restrict,
    up_scale,
)
from haarstab.oracles import iota_roundtrip, restriction_by_inner_products
from haarstab.probes import probe_capon
from haarstab.spaces import HaarCoefficients2D, ZSpaceSpec, square_surrogate_norm, z_norm
from haarstab.stabilizer import (
    EtaSchedule,
    StabilizationError,
    StabilizeConfig,
    random_split_1d,
    random_split_2d,
    stabilize_full,
    variance_bound_1d,
    variance_bound_2d,
)

from conftest import random_vector, record
from test_multipliers import eventually_constant

NORM_SPECS = ["s00:L1:L1", "s11:L1:L1", "s00:L2:L2", "s01:L1:L2"]


def test_criterion_01_exactness_core():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    bijective = iota_roundtrip(12)
    worst = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        H = random_faithful_system(depth, rng, max_frequency=9)
        K = random_faithful_system(depth, rng, max_frequency=9)
        z = random_vector(rng, depth, depth, 15)
        worst = max(worst, operator_A(H, K, operator_B(H, K, z)).max_abs_diff(z))
    elapsed = time.perf_counter() - t0
    ok = bijective and worst <= 1e-12 and elapsed < 10
    record(1, "exactness core", ok, f"iota bijective={bijective}, max |AB z - z|={worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_distribution_preservation():
    rng = np.random.default_rng(2)
    failures = 0
    for _ in range(200):
        depth = int(rng.integers(0, 4))
        H = random_faithful_system(depth, rng, max_frequency=8)
        coeffs = [rng.integers(-4, 5, size=1 << k).astype(float) for k in range(depth + 1)]
        failures += not distribution_preserved(H, coeffs)
    record(2, "distribution preservation", failures == 0, f"{200 - failures}/200 exact multiset matches")
    assert failures == 0


def test_criterion_03_restriction_oracle():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(300 + seed)
        D = DenseMultiplier.random(6, 6, rng)
        H = random_faithful_system(2, rng, max_frequency=6)
        K = random_faithful_system(2, rng, max_frequency=6)
        fast = restrict_multiplier(D, H, K)
        for key, blk in restriction_by_inner_products(D, H, K).items():
            worst = max(worst, float(np.abs(fast.block(*key) - blk).max()))
    record(3, "restriction oracle", worst <= 1e-10, f"max deviation {worst:.2e} over 50 instances")
    assert worst <= 1e-10


def test_criterion_04_monoid_law():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        D = DenseMultiplier.random(10, 10, rng)
        H1 = random_faithful_system(6, rng, max_frequency=10)
        K1 = random_faithful_system(6, rng, max_frequency=10)
        H2 = random_faithful_system(3, rng, max_frequency=6)
        K2 = random_faithful_system(3, rng, max_frequency=6)
        twice = restrict_multiplier(restrict_multiplier(D, H1, K1), H2, K2)
        once = restrict_multiplier(D, compose(H2, H1), compose(K2, K1))
        for i in range(4):
            for j in range(4):
                worst = max(worst, float(np.abs(twice.block(i, j) - once.block(i, j)).max()))
    record(4, "monoid law", worst <= 1e-10, f"max deviation {worst:.2e} over 20 instances")
    assert worst <= 1e-10


def test_criterion_05_variance_bounds():
    t0 = time.perf_counter()
    ratios_1d, ratios_2d = [], []
    m, n = 6, 12
    gamma = np.arange(1 << m)
    for seed in range(5):
        rng = np.random.default_rng(500 + seed)
        fam = [SeededMultiplier1D(seed, 1.0, n)]
        xs = [
            random_split_1d(fam, gamma, m, n, 10.0, rng, retry_limit=1, enforce_budget=False).averages[0, 0]
            for _ in range(500)
        ]
        ratios_1d.append(np.var(xs, ddof=1) / variance_bound_1d(m, gamma.size, fam[0].sup_norm()))
    for seed in range(5):
        rng = np.random.default_rng(550 + seed)
        D = SeededMultiplier(seed, 1.0, 10, 10)
        dense = DenseMultiplier(10, 10, {(0, 0): D.block(0, 0), (10, 10): D.block(10, 10)})
        root = np.array([0])
        xs = [
            random_split_2d(dense, root, 0, root, 0, 10, 10, 10.0, rng, retry_limit=1, enforce_budget=False).averages[0, 0]
            for _ in range(500)
        ]
        ratios_2d.append(np.var(xs, ddof=1) / variance_bound_2d(D.sup_norm(), 1, 1))
    elapsed = time.perf_counter() - t0
    ok = max(ratios_1d) <= 1.5 and max(ratios_2d) <= 1.5 and elapsed < 30
    record(
        5,
        "variance bounds",
        ok,
        f"max Var/bound 1-param {max(ratios_1d):.2e}, 2-param {max(ratios_2d):.2e}, {elapsed:.1f}s",
    )
    assert ok


def test_criterion_06_stabilization_end_to_end():
    eta = EtaSchedule.flat(0.25)
    bound = sum((i + j + 4) * 0.25 for i in range(3) for j in range(3))
    t0 = time.perf_counter()
    passes, transport_ok, residual_ok, worst_t2s = 0, True, True, 0.0
    for seed in range(20):
        D = SeededMultiplier(seed, 1.0, 16, 16)
        cfg = StabilizeConfig(output_depth=2, delta_balance=0.2, frequency_budget=16, seed=seed)
        try:
            res = stabilize_full(D, eta, cfg)
        except StabilizationError:
            continue
        if not res.report.passed:
            continue
        passes += 1
        transport_ok &= res.transport_error <= 1e-10
        residual_ok &= res.residual_t2s <= bound
        worst_t2s = max(worst_t2s, res.residual_t2s)
    elapsed = time.perf_counter() - t0
    ok = passes >= 18 and transport_ok and residual_ok and elapsed < 120
    record(
        6,
        "stabilization end-to-end",
        ok,
        f"{passes}/20 pass, transport<=1e-10: {transport_ok}, max residual T2S {worst_t2s:.3f} <= {bound}, {elapsed:.1f}s",
    )
    assert ok


def _combined(*ses):
    return math.sqrt(sum(s * s for s in ses))


def test_criterion_07_norm_operator_bounds():
    rng = np.random.default_rng(7)
    worst_b, worst_a, l2_gap = -math.inf, -math.inf, 0.0
    ok = True
    for trial in range(30):
        spec = ZSpaceSpec.parse(NORM_SPECS[trial % 4])
        H = random_faithful_system(2, rng, max_frequency=6)
        K = random_faithful_system(2, rng, max_frequency=6)
        z = random_vector(rng, 2, 2, 6)
        w = random_vector(rng, max(H.frequencies), max(K.frequencies), 10)
        kw = dict(grid_depth=7, samples=4000, seed=trial)
        nz, nbz = z_norm(z, spec, **kw), z_norm(operator_B(H, K, z), spec, **kw)
        nw, naw = z_norm(w, spec, **kw), z_norm(operator_A(H, K, w), spec, **kw)
        b_excess = abs(nbz.value - nz.value) - 3 * _combined(nz.std_error, nbz.std_error)
        a_excess = naw.value - nw.value - 3 * _combined(nw.std_error, naw.std_error)
        worst_b, worst_a = max(worst_b, b_excess), max(worst_a, a_excess)
        ok &= b_excess <= 1e-12 and a_excess <= 1e-12
        if str(spec) == "s00:L2:L2":
            l2_gap = max(l2_gap, abs(nbz.value - nz.value), naw.value - nw.value)
    ok &= l2_gap <= 1e-10
    record(
        7,
        "norm operator bounds",
        ok,
        f"max excess |Bz|-|z|: {worst_b:.2e}, |Az|-|z|: {worst_a:.2e} (beyond 3 stdErr); L2 exact gap {l2_gap:.1e}",
    )
    assert ok


def test_criterion_08_operator_constants():
    rng = np.random.default_rng(8)
    worst = {"project_leq": 0.0, "sub_restrict": 0.0, "down_scale": 0.0, "up_scale": 0.0}
    ok = True
    identities = True
    for trial in range(30):
        spec = ZSpaceSpec.parse(NORM_SPECS[trial % 4])
        z = random_vector(rng, 3, 3, 8)
        l0 = int(rng.integers(0, 3))
        I0 = DyadicInterval(l0, int(rng.integers(0, 1 << l0)))
        J0 = DyadicInterval(l0, int(rng.integers(0, 1 << l0)))
        I = DyadicInterval(int(rng.integers(0, 4)), 0)
        I = DyadicInterval(I.level, int(rng.integers(0, 1 << I.level)))
        J = DyadicInterval(int(rng.integers(0, 4)), 0)
        J = DyadicInterval(J.level, int(rng.integers(0, 1 << J.level)))
        down = down_scale(I0, J0, z)
        identities &= up_scale(I0, J0, down).max_abs_diff(z) == 0
        identities &= sub_restrict(I0, J0, down).max_abs_diff(down) == 0
        # a vector living at the scaled levels, partly inside I0 x J0, for the up-scale bound
        wide = down + random_vector(rng, 3 + l0, 3 + l0, 6)
        cases = [
            ("project_leq", z, project_leq(I, J, z), 1.0),
            ("sub_restrict", z, sub_restrict(I0, J0, z), 4.0),
            ("down_scale", z, down, 1.0),
            ("up_scale", wide, up_scale(I0, J0, wide), 4.0 ** (l0 + 1)),
        ]
        for name, src, img, const in cases:
            grid = 7
            kw = dict(grid_depth=grid, samples=3000, seed=trial)
            a, b = z_norm(src, spec, **kw), z_norm(img, spec, **kw)
            if a.value == 0:
                continue
            ratio = b.value / a.value
            se = ratio * _combined(a.std_error / a.value, b.std_error / max(b.value, 1e-300)) if b.value else 0.0
            worst[name] = max(worst[name], ratio / const)
            ok &= ratio <= const + 3 * se + 1e-12
    ok &= identities
    detail = ", ".join(f"{k} {v:.3f}" for k, v in worst.items())
    record(8, "operator constants", ok, f"max ratio/constant: {detail}; identities exact: {identities}")
    assert ok


def test_criterion_09_capon_probe_growth():
    t0 = time.perf_counter()
    rep = probe_capon("l1-row", ZSpaceSpec.parse("s00:L1:L2"), range(1, 7), samples=2000)
    grows = all(r.ratio >= math.sqrt(r.n + 1) / 4 - 3 * r.ratio_std_error for r in rep.rows)
    grows &= rep.ratio(6).ratio > rep.ratio(1).ratio
    l2 = probe_capon("l1-row", ZSpaceSpec.parse("s00:L2:L2"), range(1, 7), samples=2000)
    bounded = all(r.ratio <= 1 + 3 * r.ratio_std_error for r in l2.rows)
    elapsed = time.perf_counter() - t0
    ok = grows and bounded and elapsed < 180
    ratios = " ".join(f"{r.ratio:.3f}" for r in rep.rows)
    record(9, "Capon probe growth", ok, f"L1(L2) ratios {ratios}; L2(L2) max {max(r.ratio for r in l2.rows):.3f}; {elapsed:.1f}s")
    assert ok


def test_criterion_10_linf_row_probe():
    rep = probe_capon("linf-row", ZSpaceSpec.parse("s00:Linf:L1"), range(1, 6))
    ok = True
    for r in rep.rows:
        rel_z = r.norm.std_error / r.norm.value
        rel_c = r.capon_norm.std_error / r.capon_norm.value
        ok &= r.norm.value <= 2 * (1 + 3 * rel_z)
        ok &= r.capon_norm.value >= math.sqrt(r.n) / math.sqrt(2) * (1 - 3 * rel_c)
    detail = " ".join(f"n={r.n}:{r.norm.value:.2f}/{r.capon_norm.value:.3f}" for r in rep.rows)
    record(10, "Linf-row probe", ok, f"||z||/||Cz|| {detail}")
    assert ok


def test_criterion_11_pointwise_integral():
    worst = 0.0
    for seed in range(10):
        D = eventually_constant(np.random.default_rng(1100 + seed), 3, 8)
        rep = pointwise_int_check(D, 3, 4, 8)
        worst = max(worst, *rep.gaps)
    record(11, "pointwise integral identity", worst <= 1e-10, f"max gap {worst:.2e} over 10 multipliers")
    assert worst <= 1e-10


def test_criterion_12_proximity_inequalities():
    rng = np.random.default_rng(12)
    ok, worst = True, -math.inf
    for trial in range(10):
        spec = ZSpaceSpec.parse(NORM_SPECS[trial % 4])
        D = DenseMultiplier.random(5, 6, rng)
        z = random_vector(rng, 4, 4, 6)
        rep = pw_proximity_check(D, z, spec, method="exact")
        lhs = max(rep.lhs1.value, rep.lhs2.value)
        assert rep.lhs1.method == "exact-enumeration"
        worst = max(worst, lhs / rep.rhs)
        ok &= lhs <= 4 * rep.t2s * rep.z_norm.value + 1e-9 and rep.passed
    record(12, "proximity inequalities", ok, f"max lhs/rhs {worst:.3f} over 10 triples")
    assert ok


def test_criterion_13_khintchine_sandwich():
    rng = np.random.default_rng(13)
    specs = ["s11:L1:L1", "s11:L2:L1", "s11:L1:L2", "s11:Linf:L1"]
    ok, lo_ratio, hi_excess = True, math.inf, -math.inf
    for trial in range(50):
        spec = ZSpaceSpec.parse(specs[trial % 4])
        z = random_vector(rng, 3, 3, 8)
        est = z_norm(z, spec)
        sq = square_surrogate_norm(z, spec)
        lo_ratio = min(lo_ratio, est.value / sq)
        hi_excess = max(hi_excess, est.value - sq - 3 * est.std_error)
        ok &= sq / math.sqrt(2) <= est.value + 1e-12 and est.value <= sq + 3 * est.std_error + 1e-12
    record(13, "Khintchine sandwich", ok, f"min norm/surrogate {lo_ratio:.3f} (>= 0.707), max upper excess {hi_excess:.1e}")
    assert ok
