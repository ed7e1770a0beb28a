"""Spline transform checks against a knot-by-knot scalar oracle."""

import numpy as np
import pytest

from shiftbounds.autodiff import Tensor, check_gradient, no_grad
from shiftbounds.splines import (
    MIN_BIN_FRACTION,
    identity_raw_params,
    params_per_dim,
    spline_forward,
    spline_inverse,
)


def oracle_knots(raw, num_bins, bound):
    """Plain-numpy knot construction mirroring the activation conventions."""
    k = num_bins
    raw = np.asarray(raw, dtype=np.float64)

    def axis(logits):
        e = np.exp(logits - logits.max())
        frac = e / e.sum() * (1.0 - k * MIN_BIN_FRACTION) + MIN_BIN_FRACTION
        cum = np.concatenate([[0.0], np.cumsum(frac)[:-1], [1.0]])
        return cum * 2.0 * bound - bound

    xk = axis(raw[:k])
    yk = axis(raw[k : 2 * k])
    dk = np.concatenate([[1.0], np.logaddexp(0.0, raw[2 * k :]), [1.0]])
    return xk, yk, dk


def oracle_eval(u, xk, yk, dk):
    """Scalar piecewise rational-quadratic evaluation; returns (y, dy/du)."""
    j = int(np.searchsorted(xk, u, side="right")) - 1
    j = min(max(j, 0), len(xk) - 2)
    w = xk[j + 1] - xk[j]
    dy = yk[j + 1] - yk[j]
    s = dy / w
    th = (u - xk[j]) / w
    denom = s + (dk[j + 1] + dk[j] - 2.0 * s) * th * (1.0 - th)
    y = yk[j] + dy * (s * th * th + dk[j] * th * (1.0 - th)) / denom
    deriv = (
        s * s * (dk[j + 1] * th * th + 2.0 * s * th * (1.0 - th) + dk[j] * (1.0 - th) ** 2)
    ) / denom**2
    return y, deriv


BOUND = 10.0


def random_raw(rng, num_bins, n=1, scale=1.0):
    return rng.normal(0.0, scale, size=(n, params_per_dim(num_bins)))


def test_identity_params_give_identity_map():
    raw = np.tile(identity_raw_params(4), (7, 1))
    u = np.linspace(-BOUND, BOUND, 7)
    y, ld = spline_forward(u, raw, 4, BOUND)
    np.testing.assert_allclose(y.data, u, atol=1e-12)
    np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)


def test_identity_tails_for_any_parameters():
    rng = np.random.default_rng(0)
    raw = random_raw(rng, 4, n=4, scale=2.0)
    u = np.array([-25.0, -10.5, 10.5, 400.0])
    y, ld = spline_forward(u, raw, 4, BOUND)
    np.testing.assert_array_equal(y.data, u)
    np.testing.assert_array_equal(ld.data, 0.0)
    x, ld_inv = spline_inverse(u, raw, 4, BOUND)
    np.testing.assert_array_equal(x.data, u)
    np.testing.assert_array_equal(ld_inv.data, 0.0)


def test_forward_matches_oracle_at_point():
    # spec example: random 4-bin spline evaluated at u = 0.3
    rng = np.random.default_rng(11)
    raw = random_raw(rng, 4, n=1, scale=1.5)
    y, ld = spline_forward(np.array([0.3]), raw, 4, BOUND)
    xk, yk, dk = oracle_knots(raw[0], 4, BOUND)
    y_ref, deriv_ref = oracle_eval(0.3, xk, yk, dk)
    assert y.data[0] == pytest.approx(y_ref, rel=1e-12)
    assert ld.data[0] == pytest.approx(np.log(deriv_ref), rel=1e-10)


@pytest.mark.parametrize("num_bins", [2, 4, 8])
def test_forward_matches_oracle_on_grid(num_bins):
    rng = np.random.default_rng(num_bins)
    raw_row = random_raw(rng, num_bins, n=1, scale=2.0)[0]
    xk, yk, dk = oracle_knots(raw_row, num_bins, BOUND)
    us = np.linspace(-BOUND + 1e-9, BOUND - 1e-9, 41)
    raw = np.tile(raw_row, (len(us), 1))
    y, ld = spline_forward(us, raw, num_bins, BOUND)
    for i, u in enumerate(us):
        y_ref, deriv_ref = oracle_eval(u, xk, yk, dk)
        assert y.data[i] == pytest.approx(y_ref, rel=1e-10, abs=1e-10)
        assert ld.data[i] == pytest.approx(np.log(deriv_ref), rel=1e-8, abs=1e-10)


def test_round_trip_and_logdet_cancellation():
    rng = np.random.default_rng(21)
    n = 1000
    raw = random_raw(rng, 4, n=n, scale=2.0)
    u = rng.uniform(-12.0, 12.0, size=n)
    y, ld_f = spline_forward(u, raw, 4, BOUND)
    u_back, ld_i = spline_inverse(y.data, raw, 4, BOUND)
    assert np.max(np.abs(u_back.data - u)) <= 1e-6
    assert np.max(np.abs(ld_f.data + ld_i.data)) <= 1e-6


def test_monotonicity():
    rng = np.random.default_rng(3)
    raw_row = random_raw(rng, 8, n=1, scale=2.5)[0]
    us = np.linspace(-BOUND, BOUND, 200)
    raw = np.tile(raw_row, (len(us), 1))
    y, _ = spline_forward(us, raw, 8, BOUND)
    assert np.all(np.diff(y.data) > 0)


def test_gradients_wrt_inputs_and_params():
    rng = np.random.default_rng(5)
    raw = random_raw(rng, 4, n=6, scale=1.0)
    u = rng.uniform(-8.0, 8.0, size=6)

    def fwd(ts):
        y, ld = spline_forward(ts[0], ts[1], 4, BOUND)
        return (y * y).sum() + ld.sum()

    assert check_gradient(fwd, [u, raw]) < 1e-5

    with no_grad():
        y_vals, _ = spline_forward(u, raw, 4, BOUND)

    def inv(ts):
        x, ld = spline_inverse(ts[0], ts[1], 4, BOUND)
        return (x * x).sum() + ld.sum()

    assert check_gradient(inv, [y_vals.data, raw]) < 1e-5


def test_logdet_matches_numeric_derivative_of_inverse():
    rng = np.random.default_rng(9)
    raw = random_raw(rng, 4, n=1, scale=1.5)
    y0 = 1.234
    eps = 1e-6
    with no_grad():
        u_hi, _ = spline_inverse(np.array([y0 + eps]), raw, 4, BOUND)
        u_lo, _ = spline_inverse(np.array([y0 - eps]), raw, 4, BOUND)
        _, ld = spline_inverse(np.array([y0]), raw, 4, BOUND)
    numeric = (u_hi.data[0] - u_lo.data[0]) / (2 * eps)
    assert ld.data[0] == pytest.approx(np.log(numeric), rel=1e-5)
