"""Sensitivity models: constraint functionals on the latent distribution shift.

Every supported model bounds a functional of the pair
``(P(U | x), P(U | x, a))``; in the two-stage procedure the second component
is pinned to a standard normal and the first is the mixture
``pi * N(u) + (1 - pi) * q(u)`` for binary treatments (``q`` the Stage-2
pushforward density) or ``q`` itself for continuous treatments. This module
provides the pointwise density-ratio functions, differentiable Monte-Carlo
constraint estimators over latent samples, and a quadrature-based closed-form
bound for odds-ratio models used as an oracle for expectation queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, as_tensor, concat, no_grad, where

__all__ = [
    "SensitivitySpec",
    "LatentShiftSample",
    "QuadratureConfig",
    "draw_latent_sample",
    "rho_pointwise",
    "constraint_estimate",
    "closed_form_msm_bound",
    "f_function",
]

DENSITY_FLOOR = 1e-12

F_NAMES = ("kl", "tv", "he", "chi2")

ROSENBAUM_PAIR_BUDGET = 128


@dataclass(frozen=True)
class SensitivitySpec:
    """Choice of sensitivity model plus its strength parameter."""

    kind: str  # "msm" | "cmsm" | "f" | "rosenbaum" | "wmsm"
    gamma: float
    f: Optional[str] = None
    weight: Optional[str] = None  # expression over `pi`, weighted MSM only

    def __post_init__(self):
        if self.kind not in ("msm", "cmsm", "f", "rosenbaum", "wmsm"):
            raise ValueError(f"unknown sensitivity kind: {self.kind!r}")
        if self.kind == "f":
            if self.f not in F_NAMES:
                raise ValueError(f"f must be one of {F_NAMES}, got {self.f!r}")
            if self.gamma < 0:
                raise ValueError("gamma must be >= 0 for f-sensitivity models")
        else:
            if self.gamma < 1:
                raise ValueError(f"gamma must be >= 1 for {self.kind}")

    @property
    def unconfounded_value(self):
        """Constraint value attained with no latent shift."""
        return 0.0 if self.kind == "f" else 1.0

    def weight_value(self, pi):
        """Evaluate the weighted-MSM weight q(x, a); defaults to the propensity."""
        if self.weight is None:
            return pi
        return float(
            eval(  # config-supplied arithmetic expression over `pi`
                self.weight, {"__builtins__": {}}, {"pi": pi, "np": np}
            )
        )

    def to_dict(self):
        out = {"kind": self.kind, "gamma": self.gamma}
        if self.f is not None:
            out["f"] = self.f
        if self.weight is not None:
            out["weight"] = self.weight
        return out

    @staticmethod
    def from_dict(payload):
        return SensitivitySpec(
            kind=payload["kind"],
            gamma=float(payload["gamma"]),
            f=payload.get("f"),
            weight=payload.get("weight"),
        )


def f_function(name, ratio):
    """Convex generator with f(1) = 0; works on Tensors and arrays."""
    if name == "kl":
        return ratio * ratio.log() if isinstance(ratio, Tensor) else ratio * np.log(ratio)
    if name == "tv":
        diff = ratio - 1.0
        return 0.5 * (diff.abs() if isinstance(diff, Tensor) else np.abs(diff))
    if name == "he":
        root = ratio.sqrt() if isinstance(ratio, Tensor) else np.sqrt(ratio)
        return (root - 1.0) * (root - 1.0)
    if name == "chi2":
        diff = ratio - 1.0
        return diff * diff
    raise ValueError(f"unknown f generator: {name!r}")


@dataclass
class LatentShiftSample:
    """Monte-Carlo material for one (x, a): latent draws and mixing indicators."""

    u: np.ndarray  # (k, d_y) standard normal draws
    xi: np.ndarray  # (k,) Bernoulli(propensity); identically 0 for continuous a
    propensity: float
    treatment_type: str

    @property
    def k(self):
        return self.u.shape[0]


def draw_latent_sample(propensity_value, d_y, k, rng, treatment_type):
    """Draw the latent sample feeding both Stage-2 losses and constraints."""
    u = rng.standard_normal((k, d_y))
    if treatment_type == "binary":
        xi = (rng.uniform(size=k) < propensity_value).astype(np.float64)
    else:
        xi = np.zeros(k)
    return LatentShiftSample(u, xi, float(propensity_value), treatment_type)


def _check_pi(pi):
    if not (0.0 < pi < 1.0):
        raise ValueError(f"positivity violated: propensity {pi} outside (0, 1)")


def rho_pointwise(spec, densities_at_u, pi):
    """Density-ratio function of the latent shift, exactly in its pairwise forms.

    For pointwise models ``densities_at_u`` is ``(p_u_x, p_u_xa)``; for
    Rosenbaum's model it is ``((p_u1_x, p_u1_xa), (p_u2_x, p_u2_xa))``.
    """
    if spec.kind == "rosenbaum":
        (p1_x, p1_xa), (p2_x, p2_xa) = densities_at_u
        _check_density(p1_x, p1_xa, p2_x, p2_xa)
        _check_pi(pi)
        num = p1_xa * p2_x - p1_xa * p2_xa * pi
        den = p2_xa * p1_x - p1_xa * p2_xa * pi
        return num / den
    p_u_x, p_u_xa = densities_at_u
    _check_density(p_u_x, p_u_xa)
    if spec.kind == "cmsm":
        return p_u_x / p_u_xa
    _check_pi(pi)
    q = spec.weight_value(pi) if spec.kind == "wmsm" else pi
    return (p_u_x / p_u_xa - q) / (1.0 - q)


def _check_density(*values):
    for v in values:
        if not np.all(np.asarray(v) > 0):
            raise ValueError("densities must be strictly positive")


def _mixture_log_parts(stage2_flow, x, a, sample):
    """Log-densities at the latent sample points: standard normal and pushforward."""
    k, d_y = sample.u.shape
    log_phi = -0.5 * np.sum(sample.u**2, axis=1) - 0.5 * d_y * np.log(2.0 * np.pi)
    x_row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    a_row = np.asarray(a, dtype=np.float64).reshape(1)
    log_push = stage2_flow.log_prob(sample.u, x_row, a_row, tile=k)
    return Tensor(log_phi), log_push


def pointwise_ratio(spec, stage2_flow, x, a, sample):
    """Differentiable rho at each latent draw; (k,) Tensor.

    Binary treatments use the mixture latent distribution from the Bernoulli
    mixing construction; continuous treatments use the raw pushforward ratio.
    """
    log_phi, log_push = _mixture_log_parts(stage2_flow, x, a, sample)
    phi = log_phi.exp()
    push = log_push.exp()
    if sample.treatment_type == "continuous":
        ratio = (push.maximum_const(DENSITY_FLOOR)) / (phi.maximum_const(DENSITY_FLOOR))
        return ratio.maximum_const(DENSITY_FLOOR)
    pi = sample.propensity
    _check_pi(pi)
    mix = pi * phi + (1.0 - pi) * push
    if np.any(~np.isfinite(mix.data)) or np.any(mix.data <= 0.0):
        bad = int(np.argmin(np.where(np.isfinite(mix.data), mix.data, -np.inf)))
        raise ValueError(f"degenerate mixture density at latent sample {bad}")
    mix = mix.maximum_const(DENSITY_FLOOR)
    phi = phi.maximum_const(DENSITY_FLOOR)
    q = spec.weight_value(pi) if spec.kind == "wmsm" else pi
    rho = (mix / phi - q) / (1.0 - q)
    return rho.maximum_const(DENSITY_FLOOR)


def constraint_estimate(spec, stage1, stage2_flow, x, a, latent_sample):
    """Monte-Carlo estimate of the constraint value D for one (x, a).

    Returns a scalar Tensor differentiable with respect to the Stage-2
    parameters; take ``.item()`` for the plain value.
    """
    del stage1  # constraints live entirely in the latent space
    rho = pointwise_ratio(spec, stage2_flow, x, a, latent_sample)
    if spec.kind in ("msm", "cmsm", "wmsm"):
        return concat([rho, 1.0 / rho], axis=0).max()
    if spec.kind == "f":
        direct = f_function(spec.f, rho).mean()
        reverse = f_function(spec.f, 1.0 / rho).mean()
        return concat([direct.reshape(1), reverse.reshape(1)], axis=0).max()
    if spec.kind == "rosenbaum":
        k = rho.shape[0]
        if k > ROSENBAUM_PAIR_BUDGET:
            rho = rho[:ROSENBAUM_PAIR_BUDGET]
            k = ROSENBAUM_PAIR_BUDGET
        pair = rho.reshape(1, k) / rho.reshape(k, 1)
        return pair.reshape(k * k).max()
    raise ValueError(f"unknown sensitivity kind: {spec.kind!r}")


# ---- closed-form bound by step-function reweighting -------------------------------


@dataclass(frozen=True)
class QuadratureConfig:
    n_points: int = 4001
    span: float = 12.0  # grid over [-span, span] in standardized outcome units


def closed_form_msm_bound(
    stage1,
    x,
    a,
    gamma,
    direction,
    quadrature_config=None,
    propensity=None,
):
    """Sharp odds-ratio-model bound on E[Y | x, a] by reweighting Stage 1.

    The observational density is reweighted by a two-level step function,
    ``lo`` below and ``hi`` above the cutoff quantile ``gamma / (1 + gamma)``
    (mirrored for the lower bound), where for binary treatments
    ``lo = (1 - pi) / gamma + pi`` and ``hi = gamma (1 - pi) + pi`` and for
    continuous treatments ``lo = 1 / gamma`` and ``hi = gamma``. The step
    levels satisfy ``lo * tau + hi * (1 - tau) = 1`` so the reweighted density
    still integrates to one. Returns the bound in original outcome units.
    """
    if stage1.d_y != 1:
        raise ValueError("closed-form bound requires a scalar outcome")
    if direction not in ("upper", "lower"):
        raise ValueError(f"direction must be 'upper' or 'lower', got {direction!r}")
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    cfg = quadrature_config or QuadratureConfig()

    if stage1.treatment_type == "binary":
        pi = _propensity_value(propensity, x, a)
        _check_pi(pi)
        lo = (1.0 - pi) / gamma + pi
        hi = gamma * (1.0 - pi) + pi
    else:
        lo = 1.0 / gamma
        hi = gamma

    grid = np.linspace(-cfg.span, cfg.span, cfg.n_points)
    x_row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    a_row = np.asarray(a, dtype=np.float64).reshape(1)
    with no_grad():
        lp = stage1.flow.log_prob(grid.reshape(-1, 1), x_row, a_row, tile=cfg.n_points)
    pdf = np.exp(lp.data)

    dx = grid[1] - grid[0]
    cell = 0.5 * (pdf[1:] + pdf[:-1]) * dx
    mass = float(cell.sum())
    if not (0.99 <= mass <= 1.01):
        raise ValueError(
            f"stage-1 density mass {mass:.4f} on quadrature grid outside [0.99, 1.01]"
        )

    tau = gamma / (1.0 + gamma) if direction == "upper" else 1.0 / (1.0 + gamma)
    w_below, w_above = (lo, hi) if direction == "upper" else (hi, lo)

    cdf = np.concatenate([[0.0], np.cumsum(cell)])
    target = tau * mass
    j = int(np.searchsorted(cdf, target))
    j = min(max(j, 1), cfg.n_points - 1)
    # fraction of cell j-1 -> j needed to reach the cutoff quantile
    frac = (target - cdf[j - 1]) / max(cdf[j] - cdf[j - 1], 1e-300)
    frac = min(max(frac, 0.0), 1.0)

    ycell = 0.5 * (grid[1:] * pdf[1:] + grid[:-1] * pdf[:-1]) * dx
    below = float(ycell[: j - 1].sum()) + frac * float(ycell[j - 1])
    above = float(ycell.sum()) - below
    total_weight = w_below * target + w_above * (mass - target)
    bound_std = (w_below * below + w_above * above) / total_weight
    return float(stage1.y_mean[0] + stage1.y_std[0] * bound_std)


def _propensity_value(propensity, x, a):
    """Accept a float, a callable (x, a) -> value, or a fitted propensity model."""
    if propensity is None:
        raise ValueError("binary closed-form bound needs a propensity (value or model)")
    if isinstance(propensity, (int, float)):
        return float(propensity)
    if callable(propensity) and not hasattr(propensity, "propensity"):
        return float(propensity(x, a))
    return float(
        propensity.propensity(np.asarray(x).reshape(1, -1), np.asarray(a).reshape(1))[0]
    )
