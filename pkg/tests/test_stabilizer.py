import numpy as np
import pytest

from haarstab.dyadic import DyadicInterval
from haarstab.faithful import FaithfulHaarSystem, restrict_multiplier, validate
from haarstab.multipliers import (
    DenseMultiplier,
    LevelMultiplier,
    LevelMultiplier1D,
    SeededMultiplier,
    SeededMultiplier1D,
    capon,
    identity,
    root_proximity_check,
)
from haarstab.stabilizer import (
    STAGES,
    EtaSchedule,
    FrequencyBudgetExhausted,
    InsufficientWindow,
    RetryExhausted,
    StabilizeConfig,
    VarianceBudgetViolated,
    check_conditions,
    one_param_stabilize,
    random_split_1d,
    random_split_2d,
    split_cells,
    stabilize_full,
    stabilize_stage,
    variance_bound_1d,
)

R = 0.2
ETA_GEOM = EtaSchedule.geometric(0.3, R)


def tree_function(rng, top, scale):
    """g on all intervals up to ``top``: g(root) random, children move by at most scale(level)."""
    vals = [np.array([rng.uniform(-0.5, 0.5)])]
    for lev in range(1, top + 1):
        parent = np.repeat(vals[-1], 2)
        vals.append(parent + scale(lev) * rng.uniform(-1, 1, size=1 << lev))
    return vals


def semi_stable(rng, top):
    """d_{I,J} = g(I) + g'(J) with increments small enough for every condition under ETA_GEOM."""
    g = tree_function(rng, top, lambda lev: 0.1 * R ** (2 * lev - 1))
    gp = tree_function(rng, top, lambda lev: 0.1 * R ** (2 * lev - 1))
    return DenseMultiplier.from_function(top, top, lambda i, j: g[i][:, None] + gp[j][None, :])


def test_eta_schedules():
    flat = EtaSchedule.flat(0.25)
    assert flat(3, 7) == 0.25 and not flat.summable
    geo = EtaSchedule.geometric(0.3, 0.2)
    assert geo(1, 2) == pytest.approx(0.3 * 0.2**3) and geo.summable
    assert not EtaSchedule.geometric(0.3, 0.3).summable
    assert flat.proximity_bound(2) == pytest.approx(13.5)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            EtaSchedule.flat(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        StabilizeConfig(output_depth=0)
    with pytest.raises(ValueError):
        StabilizeConfig(output_depth=3, frequency_budget=6)


def test_condition_examples():
    for D in (identity(6, 6), capon(6, 6)):
        rep = check_conditions(D, EtaSchedule.flat(0.01), 1e-9, 3)
        assert rep.passed
        assert min(rep.lower, rep.upper, rep.diagonal, rep.superdiagonal) == pytest.approx(0.01)
    single = DenseMultiplier.from_entries(4, 4, [1], [1], [1.0])
    rep = check_conditions(single, EtaSchedule.flat(0.5), 0.2, 1)
    assert rep.lower == pytest.approx(-0.5) and rep.diagonal == pytest.approx(-0.5)
    assert not rep.passed


def test_split_cells():
    plus, minus = split_cells(np.array([0, 3]), np.array([1.0, -1.0]), 2, 4)
    assert plus.tolist() == [0, 1, 14, 15] and minus.tolist() == [2, 3, 12, 13]


def test_split_1d_constant_family(rng):
    fam = [LevelMultiplier1D([0.7] * 13)]
    res = random_split_1d(fam, np.arange(32), 5, 12, 1.0, rng)
    assert res.attempts == 1 and np.allclose(res.averages, 0.7)


def test_split_1d_success_rate(rng):
    fam = [SeededMultiplier1D(4, 1.0, 12)]
    delta = 4 * 2**-2.5
    ok = 0
    for _ in range(500):
        try:
            random_split_1d(fam, np.arange(32), 5, 12, delta, rng, retry_limit=1)
            ok += 1
        except RetryExhausted:
            pass
    assert ok >= 375
    with pytest.raises(VarianceBudgetViolated):
        random_split_1d(fam, np.arange(2), 1, 12, 0.1, rng)


def test_split_2d_examples(rng):
    res = random_split_2d(identity(10, 10), np.array([0]), 0, np.array([0]), 0, 10, 10, 1.0, rng, enforce_budget=False)
    assert np.all(res.averages == 1.0)
    lev = LevelMultiplier(rng.uniform(size=(11, 11)))
    res = random_split_2d(lev, np.array([0]), 0, np.array([0]), 0, 10, 10, 1e-12, rng, enforce_budget=False)
    assert np.allclose(res.averages, lev.e_avg(10, 10))
    D = SeededMultiplier(2, 1.0, 10, 10)
    delta = 4 * np.sqrt(4 * 2)
    ok = sum(
        random_split_2d(D, np.array([0]), 0, np.array([0]), 0, 10, 10, delta, rng, retry_limit=1).attempts == 1
        for _ in range(200)
    )
    assert ok >= 150


def test_variance_bound_formula():
    assert variance_bound_1d(6, 1, 2.0) == 4.0
    assert variance_bound_1d(6, 64, 1.0) == 1 / 64


def test_one_parameter_examples(rng):
    H, Dt = one_param_stabilize(LevelMultiplier1D([0.4] * 12), 0.1, (2, 11), 3, rng)
    assert validate(H) == [] and all(np.all(Dt.block(i) == 0.4) for i in range(4))
    f = [1.0 / (k + 1) for k in range(21)]
    H, Dt = one_param_stabilize(LevelMultiplier1D(f), 0.05, (3, 20), 3, rng)
    for i, m in enumerate(H.frequencies):
        assert np.allclose(Dt.block(i), f[m])
    for i in range(3):
        assert abs(f[H.frequencies[i + 1]] - f[H.frequencies[i]]) <= 0.05
    with pytest.raises(InsufficientWindow):
        one_param_stabilize(LevelMultiplier1D([float(k) for k in range(12)]), 0.25, (2, 11), 3, rng)


def test_one_parameter_seeded_success():
    ok = 0
    for seed in range(20):
        D1 = SeededMultiplier1D(seed, 1.0, 20)
        try:
            H, Dt = one_param_stabilize(D1, 0.25, (8, 20), 3, np.random.default_rng(seed))
        except InsufficientWindow:
            continue
        gaps = [np.abs(Dt.block(k + 1).reshape(-1, 2) - Dt.block(k)[:, None]).max() for k in range(3)]
        ok += max(gaps) <= 0.25 and validate(H) == [] and min(H.frequencies) >= 8
    assert ok >= 18


@pytest.mark.parametrize("D", [identity(16, 16), capon(16, 16)])
def test_stages_are_trivial_on_kernel_patterns(D):
    cfg = StabilizeConfig()
    for stage in STAGES:
        H, K = stabilize_stage(D, stage, EtaSchedule.flat(0.25), cfg)
        assert H == FaithfulHaarSystem.trivial(3) and K == FaithfulHaarSystem.trivial(4)
    res = stabilize_full(D, EtaSchedule.flat(0.25), cfg)
    assert res.report.passed and res.residual_t2 == 0
    Dt = res.D_tilde
    for i in range(4):
        for j in range(5):
            assert np.all(Dt.block(i, j) == D.block(i, j)[0, 0])


def test_unknown_stage():
    with pytest.raises(ValueError, match="unknown stage"):
        stabilize_stage(identity(8, 8), "sideways", EtaSchedule.flat(0.25), StabilizeConfig())


def test_triangular_stage_secures_its_conditions():
    D = SeededMultiplier(11, 1.0, 16, 16)
    eta = EtaSchedule.flat(0.25)
    H, K = stabilize_stage(D, "triangular", eta, StabilizeConfig(), rng=np.random.default_rng(0))
    assert validate(H) == [] and validate(K) == []
    freqs = sorted(H.frequencies + K.frequencies)
    assert K.frequencies[0] < H.frequencies[0] and len(set(freqs)) == len(freqs)
    assert all(n < m for n, m in zip(K.frequencies, H.frequencies))
    rep = check_conditions(restrict_multiplier(D, H, K), eta, 0.2, 2)
    assert rep.lower >= 0 and rep.upper >= 0


@pytest.mark.parametrize("seed", range(5))
def test_full_stabilization_on_seeded_input(seed):
    D = SeededMultiplier(seed, 1.0, 16, 16)
    eta = EtaSchedule.flat(0.25)
    cfg = StabilizeConfig(output_depth=2, delta_balance=0.2, frequency_budget=16, seed=seed)
    res = stabilize_full(D, eta, cfg)
    assert res.report.passed and res.proximity_pass
    assert validate(res.H) == [] and validate(res.K) == []
    assert max(res.H.frequencies + res.K.frequencies) <= 16
    assert res.transport_error <= 1e-10
    assert res.lambda_mu_in.lambda_ == pytest.approx(res.lambda_mu_out.lambda_, abs=1e-10)
    assert res.lambda_mu_in.mu == pytest.approx(res.lambda_mu_out.mu, abs=1e-10)
    assert res.residual_t2s <= 13.5
    assert root_proximity_check(res.D_tilde).passed
    again = stabilize_full(D, eta, cfg)
    assert again.H == res.H and again.K == res.K


def test_budget_exhaustion_names_stage():
    D = SeededMultiplier(0, 1.0, 16, 16)
    cfg = StabilizeConfig(output_depth=3, frequency_budget=7)
    with pytest.raises(FrequencyBudgetExhausted) as info:
        stabilize_full(D, EtaSchedule.flat(0.25), cfg)
    assert info.value.stage == "triangular"


def test_path_distance_on_semi_stable_multiplier(rng):
    assert ETA_GEOM.summable
    top = 7
    D = semi_stable(rng, top)
    assert check_conditions(D, ETA_GEOM, 0.1, top - 2).passed
    for l0 in range(1, top + 1):
        bound = ETA_GEOM(l0 - 1, l0 - 1)
        for k0 in range(l0, top + 1):
            B0 = D.block(k0, l0)
            for k1 in range(k0, top + 1):
                for l1 in range(l0, k1 + 1):
                    B1 = D.block(k1, l1)
                    ref = np.repeat(np.repeat(B0, 1 << (k1 - k0), 0), 1 << (l1 - l0), 1)
                    assert np.abs(B1 - ref).max() <= bound


def test_permanence_under_interlaced_systems(rng):
    top = 11
    D = semi_stable(rng, top)
    assert check_conditions(D, ETA_GEOM, 0.1, top - 2).passed
    for _ in range(10):
        freqs = np.sort(rng.choice(np.arange(1, top + 1), size=9, replace=False))
        n, m = freqs[0::2], freqs[1::2]
        K = FaithfulHaarSystem.from_level_signs(n, [rng.choice([-1.0, 1.0], size=1 << int(f)) for f in n])
        H = FaithfulHaarSystem.from_level_signs(m, [rng.choice([-1.0, 1.0], size=1 << int(f)) for f in m])
        rep = check_conditions(restrict_multiplier(D, H, K), ETA_GEOM, 0.1, 2)
        assert min(rep.lower, rep.upper, rep.diagonal, rep.superdiagonal) >= 0
