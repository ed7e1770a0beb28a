"""Conditional flow contracts: inversion, Jacobians, gradients, normalization."""

import numpy as np
import pytest

from shiftbounds.autodiff import Tensor, no_grad, numeric_gradient
from shiftbounds.flows import (
    ConditionalFlow,
    FlowConfig,
    conditional_log_prob,
    conditional_sample,
    flow_from_dict,
    flow_to_dict,
    transform_forward,
    transform_inverse,
)


def perturbed_flow(d_x=1, d_y=1, seed=0, scale=0.5, num_bins=4, hidden=16):
    """A non-identity flow with a plausibly-fitted hypernetwork output layer."""
    flow = ConditionalFlow(d_x, 1, d_y, FlowConfig(num_bins=num_bins, hidden_units=hidden), seed=seed)
    rng = np.random.default_rng(seed + 1000)
    flow.net.w3.data = rng.normal(0.0, scale / hidden, size=flow.net.w3.data.shape)
    flow.net.b3.data = flow.net.b3.data + rng.normal(0.0, scale, size=flow.net.b3.data.shape)
    # move hidden biases off the exact ReLU kink so the net is generic
    flow.net.b1.data = rng.normal(0.0, 0.05, size=flow.net.b1.data.shape)
    flow.net.b2.data = rng.normal(0.0, 0.05, size=flow.net.b2.data.shape)
    return flow


def test_identity_flow_trivial_cases():
    flow = ConditionalFlow(1, 1, 1, seed=0)
    y, ld = transform_forward(flow, np.array([0.3]), np.array([0.2]), 1.0)
    assert y[0] == pytest.approx(0.3, abs=1e-12)
    assert ld == pytest.approx(0.0, abs=1e-12)
    u, ld_inv = transform_inverse(flow, np.array([0.7]), np.array([0.2]), 0.0)
    assert u[0] == pytest.approx(0.7, abs=1e-12)
    assert ld_inv == pytest.approx(0.0, abs=1e-12)


def test_identity_flow_log_prob_matches_standard_normal():
    flow1 = ConditionalFlow(1, 1, 1, seed=0)
    assert conditional_log_prob(flow1, np.array([0.0]), np.array([0.0]), 1.0) == pytest.approx(
        -0.9189385332, abs=1e-6
    )
    flow2 = ConditionalFlow(1, 1, 2, seed=0)
    assert conditional_log_prob(flow2, np.zeros(2), np.array([0.0]), 1.0) == pytest.approx(
        -1.8378770664, abs=1e-6
    )


def test_identity_flow_sampling_equals_raw_normals():
    flow = ConditionalFlow(2, 1, 1, seed=5)
    draws = conditional_sample(flow, np.array([0.1, -0.3]), 1.0, 8, rng_seed=99)
    raw = np.random.default_rng(99).standard_normal((8, 1))
    np.testing.assert_allclose(draws, raw, atol=1e-12)
    again = conditional_sample(flow, np.array([0.1, -0.3]), 1.0, 8, rng_seed=99)
    np.testing.assert_array_equal(draws, again)


def test_round_trip_on_random_flows():
    rng = np.random.default_rng(42)
    worst = 0.0
    for trial in range(10):
        d_y = [1, 2, 3][trial % 3]
        flow = perturbed_flow(d_x=2, d_y=d_y, seed=trial)
        n = 100
        y = rng.uniform(-12, 12, size=(n, d_y))
        x = rng.uniform(-1, 1, size=(n, 2))
        a = rng.integers(0, 2, size=n).astype(float)
        with no_grad():
            u, ld_i = flow.inverse(y, x, a)
            y_back, ld_f = flow.forward(u.data, x, a)
        worst = max(worst, float(np.max(np.abs(y_back.data - y))))
        worst = max(worst, float(np.max(np.abs(ld_i.data + ld_f.data))))
    assert worst <= 1e-6


def test_monotone_inverse_1d():
    flow = perturbed_flow(d_x=1, d_y=1, seed=3)
    y = np.linspace(-9, 9, 50).reshape(-1, 1)
    x = np.zeros((50, 1))
    a = np.ones(50)
    with no_grad():
        u, _ = flow.inverse(y, x, a)
    assert np.all(np.diff(u.data[:, 0]) > 0)


@pytest.mark.parametrize("d_y", [1, 2, 3])
def test_logdet_matches_finite_difference_jacobian(d_y):
    flow = perturbed_flow(d_x=1, d_y=d_y, seed=d_y, scale=0.4)
    x = np.array([[0.3]])
    a = np.array([1.0])
    u0 = np.linspace(-0.8, 0.6, d_y)
    eps = 1e-6
    jac = np.zeros((d_y, d_y))
    with no_grad():
        for j in range(d_y):
            up = u0.copy()
            up[j] += eps
            dn = u0.copy()
            dn[j] -= eps
            y_up, _ = flow.forward(up.reshape(1, -1), x, a)
            y_dn, _ = flow.forward(dn.reshape(1, -1), x, a)
            jac[:, j] = (y_up.data[0] - y_dn.data[0]) / (2 * eps)
        _, ld = flow.forward(u0.reshape(1, -1), x, a)
    _, logabs = np.linalg.slogdet(jac)
    assert abs(ld.data[0] - logabs) / max(abs(logabs), 1e-3) <= 1e-3


def test_log_prob_gradient_matches_central_differences():
    flow = perturbed_flow(d_x=1, d_y=2, seed=8, scale=0.3, hidden=8)
    y = np.array([[0.4, -1.1], [2.0, 0.3]])
    x = np.array([[0.1], [-0.5]])
    a = np.array([0.0, 1.0])

    params = flow.parameters()
    loss = flow.log_prob(y, x, a).sum()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    def eval_loss(arrs):
        saved = [p.data.copy() for p in params]
        for p, arr in zip(params, arrs):
            p.data = arr
        with no_grad():
            out = float(flow.log_prob(y, x, a).sum().data)
        for p, s in zip(params, saved):
            p.data = s
        return out

    numeric = numeric_gradient(eval_loss, [p.data.copy() for p in params], eps=1e-5)
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.abs(gn), 1e-4)
        assert np.max(np.abs(ga - gn) / denom) <= 1e-4


def test_density_normalizes_via_quadrature():
    flow = perturbed_flow(d_x=1, d_y=1, seed=12, scale=0.8)
    grid = np.linspace(-14, 14, 4001)
    x = np.array([[0.2]])
    a = np.array([1.0])
    with no_grad():
        lp = flow.log_prob(grid.reshape(-1, 1), np.repeat(x, len(grid), axis=0), np.ones(len(grid)))
    mass = np.trapezoid(np.exp(lp.data), grid)
    assert 0.99 <= mass <= 1.01


def test_sampling_matches_quadrature_cdf():
    flow = perturbed_flow(d_x=1, d_y=1, seed=4, scale=0.7)
    x = np.array([0.5])
    a = np.array([1.0])
    n = 100_000
    draws = conditional_sample(flow, x, a, n, rng_seed=7)[:, 0]
    grid = np.linspace(-14, 14, 4001)
    with no_grad():
        lp = flow.log_prob(
            grid.reshape(-1, 1), np.repeat(x.reshape(1, -1), len(grid), axis=0), np.ones(len(grid))
        )
    pdf = np.exp(lp.data)
    cdf = np.cumsum((pdf[1:] + pdf[:-1]) * 0.5 * np.diff(grid))
    cdf = np.concatenate([[0.0], cdf])
    cdf /= cdf[-1]
    empirical = np.searchsorted(np.sort(draws), grid, side="right") / n
    ks = np.max(np.abs(empirical - cdf))
    assert ks <= 0.02


def test_autoregressive_structure():
    # perturbing outcome dimension j must not change u_k for k < j
    flow = perturbed_flow(d_x=1, d_y=3, seed=9, scale=0.4)
    x = np.array([[0.0]])
    a = np.array([1.0])
    y = np.array([[0.2, -0.4, 1.0]])
    with no_grad():
        u_base, _ = flow.inverse(y, x, a)
        for j in range(3):
            y_pert = y.copy()
            y_pert[0, j] += 0.37
            u_pert, _ = flow.inverse(y_pert, x, a)
            np.testing.assert_array_equal(u_pert.data[0, :j], u_base.data[0, :j])
            assert abs(u_pert.data[0, j] - u_base.data[0, j]) > 0


def test_checkpoint_round_trip_bit_exact():
    flow = perturbed_flow(d_x=3, d_y=2, seed=17, scale=0.6)
    payload = flow_to_dict(flow)
    clone = flow_from_dict(payload)
    np.testing.assert_array_equal(clone.parameter_vector(), flow.parameter_vector())
    y = np.array([[0.3, -0.2]])
    x = np.array([[0.1, 0.2, -0.4]])
    a = np.array([1.0])
    assert conditional_log_prob(clone, y[0], x[0], 1.0) == conditional_log_prob(
        flow, y[0], x[0], 1.0
    )


def test_checkpoint_version_guard():
    flow = ConditionalFlow(1, 1, 1, seed=0)
    payload = flow_to_dict(flow)
    payload["format_version"] = 99
    with pytest.raises(ValueError, match="format_version"):
        flow_from_dict(payload)


def test_non_finite_inputs_rejected():
    flow = ConditionalFlow(1, 1, 1, seed=0)
    with pytest.raises(ValueError, match="non-finite"):
        transform_forward(flow, np.array([np.nan]), np.array([0.0]), 1.0)
    flow.net.w1.data[0, 0] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        transform_forward(flow, np.array([0.0]), np.array([0.0]), 1.0)
