"""Monotone rational-quadratic spline transforms with identity tails.

Each scalar map is a piecewise rational-quadratic spline on ``[-B, B]`` with
``K`` bins and the identity outside. Bin widths and heights come from a
softmax (so they are positive and sum to ``2B``), interior knot derivatives
from a softplus (positive), and the boundary derivatives are pinned to 1 so
the map is C1 where it meets the identity tails. Raw parameters of exactly
zero for widths/heights and ``softplus_inv(1)`` for derivatives therefore
yield the identity map.

Knot construction is the expensive differentiable part, so it is exposed
separately: callers with one parameter row per conditioning unit but many
latent samples per unit build knots once and tile them.

All functions are differentiable through :mod:`shiftbounds.autodiff` with
respect to both the inputs and the raw parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, where

__all__ = [
    "params_per_dim",
    "identity_raw_params",
    "SplineKnots",
    "knots_from_raw",
    "spline_forward",
    "spline_inverse",
    "spline_forward_knots",
    "spline_inverse_knots",
]

# Minimum fraction of the interval a single bin may occupy. Uniform logits
# still produce exactly uniform bins, so the identity initialization is exact.
MIN_BIN_FRACTION = 1e-4

SOFTPLUS_INV_ONE = math.log(math.e - 1.0)


def params_per_dim(num_bins):
    """Raw parameter count per transformed dimension: K widths, K heights, K-1 derivatives."""
    return 3 * num_bins - 1


def identity_raw_params(num_bins):
    """Raw parameter vector that makes the spline the identity map."""
    raw = np.zeros(params_per_dim(num_bins))
    raw[2 * num_bins :] = SOFTPLUS_INV_ONE
    return raw


@dataclass
class SplineKnots:
    """Knot positions and derivatives: (n, K+1) Tensors plus the tail bound."""

    xk: Tensor
    yk: Tensor
    derivs: Tensor
    bound: float

    def repeat_rows(self, reps):
        if reps == 1:
            return self
        return SplineKnots(
            self.xk.repeat_rows(reps),
            self.yk.repeat_rows(reps),
            self.derivs.repeat_rows(reps),
            self.bound,
        )


def knots_from_raw(raw, num_bins, bound):
    """Build knot grids from raw parameters (n, 3K-1) -> SplineKnots."""
    k = num_bins
    raw = as_tensor(raw)
    w_logits = raw[:, :k]
    h_logits = raw[:, k : 2 * k]
    d_raw = raw[:, 2 * k :]

    n = raw.shape[0]
    zeros = Tensor(np.zeros((n, 1)))
    ones = Tensor(np.ones((n, 1)))

    def axis_knots(logits):
        frac = logits.softmax(axis=-1) * (1.0 - k * MIN_BIN_FRACTION) + MIN_BIN_FRACTION
        cum = frac.cumsum_last()
        # last knot pinned exactly to the boundary
        parts = [zeros] + ([cum[:, :-1]] if k > 1 else []) + [ones]
        return concat(parts, axis=-1) * (2.0 * bound) - bound  # (n, K+1)

    xk = axis_knots(w_logits)
    yk = axis_knots(h_logits)
    derivs = concat([ones, d_raw.softplus(), ones], axis=-1)
    return SplineKnots(xk, yk, derivs, float(bound))


def _bin_index(knots_data, values):
    idx = np.sum(knots_data[:, :-1] <= values[:, None], axis=-1) - 1
    return np.clip(idx, 0, knots_data.shape[1] - 2).astype(np.intp)[:, None]


def _gather_bin(knots, idx):
    x_lo = knots.xk.gather_last(idx)[:, 0]
    x_hi = knots.xk.gather_last(idx + 1)[:, 0]
    y_lo = knots.yk.gather_last(idx)[:, 0]
    y_hi = knots.yk.gather_last(idx + 1)[:, 0]
    d_lo = knots.derivs.gather_last(idx)[:, 0]
    d_hi = knots.derivs.gather_last(idx + 1)[:, 0]
    return x_lo, x_hi, y_lo, y_hi, d_lo, d_hi


def _log_derivative(theta, s, d_lo, d_hi, denom):
    one_m = 1.0 - theta
    num = d_hi * theta * theta + 2.0 * s * theta * one_m + d_lo * one_m * one_m
    return 2.0 * s.log() + num.log() - 2.0 * denom.log()


def spline_forward_knots(u, knots):
    """Apply the spline given prebuilt knots; returns (y, log|dy/du|)."""
    u = as_tensor(u)
    bound = knots.bound
    inside = np.abs(u.data) <= bound

    u_c = u.clip(-bound, bound)
    idx = _bin_index(knots.xk.data, u_c.data)
    x_lo, x_hi, y_lo, y_hi, d_lo, d_hi = _gather_bin(knots, idx)

    w = x_hi - x_lo
    dy = y_hi - y_lo
    s = dy / w
    theta = (u_c - x_lo) / w
    th1 = theta * (1.0 - theta)
    denom = s + (d_hi + d_lo - 2.0 * s) * th1

    y_in = y_lo + dy * (s * theta * theta + d_lo * th1) / denom
    ld_in = _log_derivative(theta, s, d_lo, d_hi, denom)

    y = where(inside, y_in, u)
    log_det = where(inside, ld_in, Tensor(np.zeros_like(u.data)))
    return y, log_det


def spline_inverse_knots(y, knots):
    """Invert the spline given prebuilt knots; returns (u, log|du/dy|)."""
    y = as_tensor(y)
    bound = knots.bound
    inside = np.abs(y.data) <= bound

    y_c = y.clip(-bound, bound)
    idx = _bin_index(knots.yk.data, y_c.data)
    x_lo, x_hi, y_lo, y_hi, d_lo, d_hi = _gather_bin(knots, idx)

    w = x_hi - x_lo
    dy = y_hi - y_lo
    s = dy / w
    t = y_c - y_lo
    mix = d_hi + d_lo - 2.0 * s

    qa = dy * (s - d_lo) + t * mix
    qb = dy * d_lo - t * mix
    qc = -s * t
    disc = (qb * qb - 4.0 * qa * qc).maximum_const(0.0)
    theta = (2.0 * qc) / (-qb - disc.sqrt())
    theta = theta.clip(0.0, 1.0)

    u_in = x_lo + theta * w
    th1 = theta * (1.0 - theta)
    denom = s + mix * th1
    ld_in = -_log_derivative(theta, s, d_lo, d_hi, denom)

    u = where(inside, u_in, y)
    log_det = where(inside, ld_in, Tensor(np.zeros_like(y.data)))
    return u, log_det


def spline_forward(u, raw, num_bins, bound):
    """Apply the spline to `u`; returns (y, per-element log|dy/du|).

    u: Tensor or array (n,); raw: Tensor (n, 3K-1).
    """
    return spline_forward_knots(u, knots_from_raw(raw, num_bins, bound))


def spline_inverse(y, raw, num_bins, bound):
    """Invert the spline at `y`; returns (u, per-element log|du/dy|)."""
    return spline_inverse_knots(y, knots_from_raw(raw, num_bins, bound))
