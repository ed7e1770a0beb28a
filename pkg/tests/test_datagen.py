"""Generative processes: marginal consistency, ground truth, oracle parameters."""

import numpy as np
import pytest

from shiftbounds.datagen import (
    BinaryMsmDgpConfig,
    ContinuousDgpConfig,
    SemiSyntheticConfig,
    evaluation_grid,
    generate_binary,
    generate_continuous,
    generate_semisynthetic,
    oracle_gamma,
    oracle_gamma_averaged,
    oracle_gamma_median,
    oracle_gamma_uniform,
)
from shiftbounds.sensitivity import SensitivitySpec, f_function


def test_binary_propensity_at_zero_is_half():
    _, truth = generate_binary(BinaryMsmDgpConfig(n=10))
    assert truth.observed_propensity(np.array([0.0]))[0] == pytest.approx(0.5)


def test_binary_rejects_gamma_below_one():
    with pytest.raises(ValueError, match="gamma"):
        BinaryMsmDgpConfig(n=10, gamma=0.5)


def test_binary_marginal_propensity_matches_pi():
    ds, truth = generate_binary(BinaryMsmDgpConfig(n=100_000, gamma=2.0, seed=1))
    edges = np.linspace(-1, 1, 11)
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ds.x[:, 0] >= lo) & (ds.x[:, 0] < hi)
        n_bin = sel.sum()
        emp = ds.a[sel].mean()
        pi_mid = truth.observed_propensity(np.array([(lo + hi) / 2]))[0]
        se = np.sqrt(pi_mid * (1 - pi_mid) / n_bin)
        assert abs(emp - pi_mid) <= 3 * se + 0.01


def test_binary_unconfounded_collapse():
    ds, truth = generate_binary(BinaryMsmDgpConfig(n=200_000, gamma=1.0, seed=2))
    # treatment independent of u given x: empirical odds ratio about 1
    sel = np.abs(ds.x[:, 0]) < 0.3
    spec = SensitivitySpec("msm", 1.0)
    assert oracle_gamma(truth, spec, np.array([0.1]), 1.0) == pytest.approx(1.0)
    assert sel.sum() > 1000


def test_binary_odds_ratio_matches_generative_gamma():
    # empirical OR(pi(x), pi(x, u)) should sit at gamma or 1/gamma
    gamma = 2.0
    ds, truth = generate_binary(BinaryMsmDgpConfig(n=100_000, gamma=gamma, seed=3))
    rng = np.random.default_rng(0)
    # regenerate u from the same seed path is awkward; instead simulate directly
    n = 200_000
    x = rng.uniform(-1, 1, size=n)
    pi = truth.observed_propensity(x)
    p_u = ((gamma - 1) * pi + 1) / (gamma + 1)
    u = (rng.uniform(size=n) < p_u).astype(float)
    full = truth._binary_full_propensity(x, u)
    a = (rng.uniform(size=n) < full).astype(float)
    sel = np.abs(x - 0.2) < 0.1
    pi_hat = a[sel].mean()
    for u_val, target in ((1.0, 1.0 / gamma), (0.0, gamma)):
        su = sel & (u == u_val)
        pi_u = a[su].mean()
        odds = (pi_hat / (1 - pi_hat)) / (pi_u / (1 - pi_u))
        assert odds == pytest.approx(target, rel=0.05)


def test_binary_oracle_gamma_constant_for_msm_and_rosenbaum():
    _, truth = generate_binary(BinaryMsmDgpConfig(n=10, gamma=2.0))
    for x in (-0.9, 0.0, 0.7):
        for a in (0.0, 1.0):
            g_msm = oracle_gamma(truth, SensitivitySpec("msm", 2.0), np.array([x]), a)
            g_rb = oracle_gamma(truth, SensitivitySpec("rosenbaum", 2.0), np.array([x]), a)
            assert g_msm == pytest.approx(2.0, rel=1e-9)
            assert g_rb == pytest.approx(4.0, rel=1e-9)


def test_binary_kl_oracle_matches_brute_force_simulation():
    gamma = 2.0
    _, truth = generate_binary(BinaryMsmDgpConfig(n=10, gamma=gamma))
    x, a = np.array([0.3]), 1.0
    analytic = oracle_gamma(truth, SensitivitySpec("f", 1.0, f="kl"), x, a)

    # brute force: estimate P(u | x, a) and P(u | x) from a huge simulation
    rng = np.random.default_rng(42)
    n = 2_000_000
    xs = np.full(n, 0.3)
    pi = truth.observed_propensity(xs)
    p_u = ((gamma - 1) * pi + 1) / (gamma + 1)
    u = (rng.uniform(size=n) < p_u).astype(float)
    full = truth._binary_full_propensity(xs, u)
    treat = (rng.uniform(size=n) < full).astype(float)
    p_u1_x = u.mean()
    p_u1_xa = u[treat == 1.0].mean()
    pi_a = treat.mean()
    p_x = np.array([1 - p_u1_x, p_u1_x])
    p_xa = np.array([1 - p_u1_xa, p_u1_xa])
    rho = (p_x / p_xa - pi_a) / (1 - pi_a)
    brute = max(np.sum(p_xa * f_function("kl", rho)), np.sum(p_xa * f_function("kl", 1 / rho)))
    assert analytic == pytest.approx(brute, rel=0.05)


def test_binary_ground_truth_matches_simulation():
    cfg = BinaryMsmDgpConfig(n=10, gamma=2.0)
    _, truth = generate_binary(cfg)
    rng = np.random.default_rng(9)
    n = 400_000
    x = np.full(n, -0.4)
    pi = truth.observed_propensity(x)
    p_u = ((cfg.gamma - 1) * pi + 1) / (cfg.gamma + 1)
    u = (rng.uniform(size=n) < p_u).astype(float)
    for a in (0.0, 1.0):
        sign = 2 * a - 1
        y = sign * x + sign - 2 * np.sin(2 * sign * x) - 2 * (2 * u - 1) * (1 + 0.5 * x)
        mc = y.mean()
        se = y.std() / np.sqrt(n)
        assert truth.conditional_mean(np.array([-0.4]), a) == pytest.approx(mc, abs=3 * se)


def test_continuous_gamma_zero_is_unconfounded():
    _, truth = generate_continuous(ContinuousDgpConfig(n=10, gamma=0.0))
    g = oracle_gamma(truth, SensitivitySpec("cmsm", 1.0), np.array([0.2]), 0.5)
    assert g == pytest.approx(1.0)


def test_continuous_ground_truth_value():
    _, truth = generate_continuous(ContinuousDgpConfig(n=10, gamma=2.0))
    assert truth.conditional_mean(np.array([0.0]), 0.5) == pytest.approx(1.5)


def test_continuous_empirical_bin_matches_truth():
    cfg = ContinuousDgpConfig(n=100_000, gamma=2.0, seed=5)
    ds, truth = generate_continuous(cfg)
    sel = (np.abs(ds.x[:, 0] - 0.3) < 0.05) & (np.abs(ds.a - 0.5) < 0.05)
    n_bin = int(sel.sum())
    assert n_bin > 200
    mc = ds.y[sel, 0].mean()
    se = ds.y[sel, 0].std() / np.sqrt(n_bin)
    # bin approximation adds a small bias on top of the MC error
    assert truth.conditional_mean(np.array([0.3]), 0.5) == pytest.approx(mc, abs=3 * se + 0.02)


def test_continuous_rejects_bad_strength():
    with pytest.raises(ValueError, match="strength"):
        ContinuousDgpConfig(n=10, gamma=2.5)


def test_continuous_positivity_error_at_corner():
    _, truth = generate_continuous(ContinuousDgpConfig(n=10, gamma=2.0))
    with pytest.raises(ValueError, match="positivity"):
        oracle_gamma(truth, SensitivitySpec("cmsm", 1.0), np.array([-1.0]), 0.5)


def test_semisynthetic_weight_mean_one_and_marginal():
    cfg = SemiSyntheticConfig(n=150_000, gamma=0.25, seed=7)
    ds, truth = generate_semisynthetic(cfg)
    pi = truth.observed_propensity(ds.x)
    bins = np.quantile(pi, np.linspace(0, 1, 9))
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (pi >= lo) & (pi < hi)
        if sel.sum() < 2000:
            continue
        emp, model = ds.a[sel].mean(), pi[sel].mean()
        se = np.sqrt(model * (1 - model) / sel.sum())
        assert abs(emp - model) <= 3 * se + 0.005


def test_semisynthetic_gamma_one_is_unconfounded():
    cfg = SemiSyntheticConfig(n=10, gamma=1.0)
    _, truth = generate_semisynthetic(cfg)
    x = np.zeros((1, cfg.d_x))
    w = truth._semisynthetic_weight(x, np.array([0.1, 0.5, 0.9]))
    np.testing.assert_allclose(w, 1.0)


def test_semisynthetic_cate_formula():
    cfg = SemiSyntheticConfig(n=10, gamma=0.25, d_x=8)
    _, truth = generate_semisynthetic(cfg)
    x = np.arange(8, dtype=float).reshape(1, -1) / 10.0
    expected = 2 * (x.sum() + 0.5) / 9.0
    assert truth.cate(x)[0] == pytest.approx(expected)


def test_semisynthetic_oracle_median_finite():
    cfg = SemiSyntheticConfig(n=4000, gamma=0.25, seed=11)
    ds, truth = generate_semisynthetic(cfg)
    pi = truth.observed_propensity(ds.x)
    keep = (pi >= 0.3) & (pi <= 0.7)
    x_test = ds.x[keep][:200]
    for spec in (SensitivitySpec("msm", 1.0), SensitivitySpec("f", 1.0, f="kl")):
        med = oracle_gamma_median(truth, spec, x_test, u_grid_size=101)
        assert np.isfinite(med)
        assert med >= spec.unconfounded_value


def test_oracle_aggregations():
    _, truth = generate_binary(BinaryMsmDgpConfig(n=10, gamma=2.0))
    grid = evaluation_grid(21)
    uni = oracle_gamma_uniform(truth, SensitivitySpec("f", 1.0, f="kl"), grid, (0.0, 1.0))
    per_point = oracle_gamma(truth, SensitivitySpec("f", 1.0, f="kl"), np.array([0.0]), 1.0)
    assert uni >= per_point

    _, truth_c = generate_continuous(ContinuousDgpConfig(n=10, gamma=2.0))
    avg = oracle_gamma_averaged(truth_c, SensitivitySpec("cmsm", 1.0), 0.5, n_cells=51)
    assert np.isfinite(avg) and avg > 1.0
