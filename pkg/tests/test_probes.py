import math

import numpy as np
import pytest

from haarstab.dyadic import ROOT, DyadicInterval, GridTooCoarse, StepFunction1D
from haarstab.multipliers import SeededMultiplier, capon, identity
from haarstab.probes import ProbeFamilySpec, build_probe, check_factorization, growth_slope, probe_capon
from haarstab.spaces import HaarCoefficients2D, ZSpaceSpec
from haarstab.stabilizer import EtaSchedule, StabilizeConfig

L1L2 = ZSpaceSpec.parse("s00:L1:L2")
L2L2 = ZSpaceSpec.parse("s00:L2:L2")


def test_l1_row_n0_is_single_term():
    z = build_probe(ProbeFamilySpec("l1-row", 0, L1L2))
    assert z.entries == {(1, 1): 1.0}


@pytest.mark.parametrize("n", range(0, 6))
def test_l1_row_first_factor_identity(n):
    z = build_probe(ProbeFamilySpec("l1-row", n, L1L2))
    grid = n + 2
    # the first factor is the value of the field at any t where the second factor equals g(t) = n + 1
    f = z.evaluate(grid).values[:, 0] / (n + 1)
    expected = -np.ones(1 << grid)
    expected[: 1 << (grid - n - 1)] += 2.0 ** (n + 1)
    assert np.array_equal(f, expected)
    if n == 1:
        assert np.array_equal(f, 4 * StepFunction1D.indicator(DyadicInterval(2, 0), 3).values - 1)


def test_linf_row_n1_coefficients():
    z = build_probe(ProbeFamilySpec("linf-row", 1, ZSpaceSpec.parse("s00:Linf:L1")))
    assert len(z) == 8
    assert all(z.get(DyadicInterval(2, 0), DyadicInterval(2, b)) == 1.0 for b in range(4))
    assert all(z.get(DyadicInterval(1, 0), DyadicInterval(2, b)) == -1.0 for b in range(4))


def test_probe_spec_validation():
    with pytest.raises(GridTooCoarse):
        ProbeFamilySpec("l1-row", 3, L1L2, grid_depth=4)
    with pytest.raises(GridTooCoarse):
        ProbeFamilySpec("linf-row", 2, L1L2, grid_depth=5)
    with pytest.raises(ValueError):
        ProbeFamilySpec("l1-row", 2, L1L2, coefficients=(1.0, 2.0))
    with pytest.raises(ValueError):
        ProbeFamilySpec("zigzag", 2, L1L2)


def test_swap_transposes_the_probe():
    a = build_probe(ProbeFamilySpec("l1-row", 3, L1L2))
    b = build_probe(ProbeFamilySpec("l1-row", 3, L1L2, swap=True))
    assert b.entries == {(c, r): v for (r, c), v in a.entries.items()}


def test_ratios_invariant_under_coefficient_scaling():
    a = [1.0, -2.0, 0.5, 3.0]
    base = probe_capon("l1-row", L1L2, [3], coefficients=a)
    scaled = probe_capon("l1-row", L1L2, [3], coefficients=[-2.5 * x for x in a])
    assert scaled.rows[0].ratio == pytest.approx(base.rows[0].ratio, rel=1e-12)
    assert scaled.rows[0].norm.value == pytest.approx(2.5 * base.rows[0].norm.value, rel=1e-12)


def test_l1_row_growth_and_l2_boundedness():
    rep = probe_capon("l1-row", L1L2, range(1, 7))
    for row in rep.rows:
        assert row.ratio >= math.sqrt(row.n + 1) / 4 - 3 * row.ratio_std_error
        assert row.capon_norm.value >= 0.5 * (row.n + 1) - 1e-12
        assert row.norm.value <= 2 * math.sqrt(row.n + 1) + 1e-12
    assert rep.rows[-1].ratio > rep.rows[0].ratio and rep.growth_fit > 0
    for row in probe_capon("l1-row", L2L2, range(1, 7)).rows:
        assert row.ratio <= 1 + 3 * row.ratio_std_error


def test_growth_slope():
    assert growth_slope([1, 2, 4], [1.0, 2.0, 4.0]) == pytest.approx(1.0)
    assert math.isnan(growth_slope([0, 1], [1.0, 2.0]))


def test_factorization_on_kernel_patterns():
    eta, cfg = EtaSchedule.flat(0.25), StabilizeConfig()
    spec = ZSpaceSpec.parse("s11:L1:L1")
    rep = check_factorization(identity(16, 16), eta, cfg, spec, trials=5)
    assert rep.passed and rep.variation.t2_norm == 0 and rep.empirical_ratios == [0.0] * 5
    rep = check_factorization(capon(16, 16), eta, cfg, spec, trials=5)
    assert rep.result.lambda_mu_out.lambda_ == 1.0 and rep.result.lambda_mu_out.mu == 0.0
    assert rep.variation.t2_norm == 0 and rep.passed


def test_factorization_on_seeded_input():
    eta = EtaSchedule.flat(0.25)
    rep = check_factorization(SeededMultiplier(3, 1.0, 16, 16), eta, StabilizeConfig(seed=3), L2L2, trials=5)
    assert rep.passed
    assert rep.variation.t2s_semi_norm <= eta.proximity_bound(2)
    assert rep.balancing_residue <= 0.2
    assert all(r >= 0 for r in rep.empirical_ratios)
