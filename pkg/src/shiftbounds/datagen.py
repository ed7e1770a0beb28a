"""Synthetic data-generating processes with analytic ground truth.

Three generators are provided:

* a binary-treatment process whose full distribution satisfies an odds-ratio
  sensitivity model with a known generative parameter, so the oracle
  sensitivity parameter is available in closed form;
* a continuous-treatment process with Beta-distributed doses and a binary
  latent confounder (deliberately not an exact density-ratio model);
* a semi-synthetic scheme that reweights a synthetic propensity with a
  uniform latent confounder, leaving the observed propensity invariant.

Each generator returns the sampled :class:`~shiftbounds.data.Dataset` together
with a ground-truth object exposing true conditional means and the latent
densities needed to compute oracle sensitivity parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .data import Dataset
from .sensitivity import SensitivitySpec, f_function

__all__ = [
    "BinaryMsmDgpConfig",
    "ContinuousDgpConfig",
    "SemiSyntheticConfig",
    "GroundTruth",
    "generate_binary",
    "generate_continuous",
    "generate_semisynthetic",
    "oracle_gamma",
    "oracle_gamma_uniform",
    "oracle_gamma_averaged",
    "oracle_gamma_median",
    "evaluation_grid",
]


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def evaluation_grid(n_points=101):
    """Equispaced covariate grid used for figures and coverage evaluation."""
    return np.linspace(-1.0, 1.0, n_points)


# ---- configs -----------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryMsmDgpConfig:
    n: int = 10_000
    gamma: float = 2.0  # generative odds-ratio strength, >= 1
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 1.0:
            raise ValueError("generative gamma must be >= 1")


@dataclass(frozen=True)
class ContinuousDgpConfig:
    n: int = 10_000
    gamma: float = 2.0  # confounding strength in the Beta parameters
    seed: int = 0

    def __post_init__(self):
        # Beta parameters 2 + x + gamma (u - 1/2) must stay positive on x in (-1, 1)
        if self.gamma < 0.0 or self.gamma > 2.0:
            raise ValueError("confounding strength must lie in [0, 2]")


@dataclass(frozen=True)
class SemiSyntheticConfig:
    n: int = 10_000
    gamma: float = 0.25  # confounding strength of the treatment reweighting
    d_x: int = 8
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("confounding strength must lie in [0, 1]")


# ---- ground truth -------------------------------------------------------------------


class GroundTruth:
    """Analytic quantities of a generative process at arbitrary (x, a)."""

    def __init__(self, kind, config):
        self.kind = kind
        self.config = config

    # -- observed and full treatment models -----------------------------------------
    def observed_propensity(self, x):
        """P(A = 1 | x) for binary treatments; raises for continuous."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "binary":
            return 0.25 + 0.5 * sigmoid(3.0 * x[..., 0] if x.ndim > 1 else 3.0 * x)
        if self.kind == "semisynthetic":
            s = x.sum(axis=-1)
            return 0.25 + 0.5 * sigmoid(3.0 / self.config.d_x * s)
        raise ValueError("observed propensity is a probability only for binary treatments")

    def _binary_full_propensity(self, x, u):
        g = self.config.gamma
        pi = self.observed_propensity(np.asarray(x))
        s_plus = 1.0 / ((1.0 - 1.0 / g) * pi + 1.0 / g)
        s_minus = 1.0 / ((1.0 - g) * pi + g)
        return pi * np.where(u > 0.5, s_plus, s_minus)

    def _semisynthetic_weight(self, x, u):
        g = self.config.gamma
        pi = self.observed_propensity(np.asarray(x))
        first = g + 2.0 * u * (1.0 - g)
        second = 2.0 - 1.0 / pi + 2.0 * u * (1.0 / pi - 1.0)
        return np.where(g >= 2.0 - 1.0 / pi, first, second)

    # -- true conditional means -------------------------------------------------------
    def conditional_mean(self, x, a):
        """True E[Y(a) | x], marginalizing the latent confounder analytically."""
        x = np.asarray(x, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if self.kind == "binary":
            xv = x[..., 0] if x.ndim > 1 else x
            g = self.config.gamma
            pi = self.observed_propensity(x)
            p_u = ((g - 1.0) * pi + 1.0) / (g + 1.0)
            sign = 2.0 * a - 1.0
            base = sign * xv + sign - 2.0 * np.sin(2.0 * sign * xv)
            return base - 2.0 * (2.0 * p_u - 1.0) * (1.0 + 0.5 * xv)
        if self.kind == "continuous":
            xv = x[..., 0] if x.ndim > 1 else x
            return a + xv * np.exp(-xv * a) + 0.5 * xv + 1.0
        s = x.sum(axis=-1)
        return (2.0 * a - 1.0) * (s + 0.5) / (self.config.d_x + 1)

    def cate(self, x):
        return self.conditional_mean(x, 1.0) - self.conditional_mean(x, 0.0)

    # -- latent densities for oracle sensitivity parameters ---------------------------
    def latent_shift_densities(self, x, a, u_grid_size=201):
        """(support, weights, p_u_x, p_u_xa, pi_a) of the latent confounder at (x, a).

        `support` is the latent grid (two-point or a quadrature grid on [0, 1]),
        `weights` are quadrature weights (point masses for discrete latents),
        and ``pi_a = P(A = a | x)`` (a probability for binary treatments, a
        density value for continuous ones).
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if self.kind == "binary":
            a = float(a)
            pi1 = float(self.observed_propensity(x)[0])
            g = self.config.gamma
            p_u1 = ((g - 1.0) * pi1 + 1.0) / (g + 1.0)
            p_u_x = np.array([1.0 - p_u1, p_u1])
            full1 = np.array(
                [float(self._binary_full_propensity(x, u)[0]) for u in (0.0, 1.0)]
            )
            p_a_xu = full1 if a > 0.5 else 1.0 - full1
            pi_a = pi1 if a > 0.5 else 1.0 - pi1
            p_u_xa = p_a_xu * p_u_x / pi_a
            return np.array([0.0, 1.0]), np.ones(2), p_u_x, p_u_xa, pi_a
        if self.kind == "continuous":
            a = float(a)
            g = self.config.gamma
            xv = float(x[0])
            alphas = [2.0 + xv + g * (u - 0.5) for u in (0.0, 1.0)]
            if min(alphas) <= 0.0:
                raise ValueError(
                    f"positivity failure: Beta parameter {min(alphas):.4f} <= 0 at x={xv}"
                )
            dens = np.array([stats.beta.pdf(a, al, al) for al in alphas])
            if np.any(dens <= 0.0):
                raise ValueError(f"positivity failure: zero treatment density at a={a}")
            p_a_x = 0.5 * dens.sum()
            p_u_x = np.array([0.5, 0.5])
            p_u_xa = 0.5 * dens / p_a_x
            return np.array([0.0, 1.0]), np.ones(2), p_u_x, p_u_xa, p_a_x
        # semisynthetic: uniform latent on [0, 1]; midpoint rule keeps the
        # endpoint u = 1 (where the arm-0 density can vanish) off the grid,
        # so suprema below are grid-suprema of a possibly unbounded ratio
        a = float(a)
        grid = (np.arange(u_grid_size) + 0.5) / u_grid_size
        w = np.full(u_grid_size, 1.0 / u_grid_size)
        pi1 = float(self.observed_propensity(x.reshape(1, -1))[0])
        full1 = self._semisynthetic_weight(x.reshape(1, -1), grid[:, None].T).reshape(-1) * pi1
        p_a_xu = full1 if a > 0.5 else 1.0 - full1
        pi_a = pi1 if a > 0.5 else 1.0 - pi1
        p_u_x = np.ones(u_grid_size)
        p_u_xa = p_a_xu * p_u_x / pi_a
        return grid, w, p_u_x, p_u_xa, pi_a


# ---- generators ---------------------------------------------------------------------


def generate_binary(config):
    """Binary-treatment process satisfying an odds-ratio model with known strength."""
    truth = GroundTruth("binary", config)
    rng = np.random.default_rng(config.seed)
    n, g = config.n, config.gamma
    x = rng.uniform(-1.0, 1.0, size=n)
    pi = truth.observed_propensity(x)
    p_u = ((g - 1.0) * pi + 1.0) / (g + 1.0)
    u = (rng.uniform(size=n) < p_u).astype(np.float64)
    full = truth._binary_full_propensity(x, u)
    a = (rng.uniform(size=n) < full).astype(np.float64)
    sign = 2.0 * a - 1.0
    y = (
        sign * x
        + sign
        - 2.0 * np.sin(2.0 * sign * x)
        - 2.0 * (2.0 * u - 1.0) * (1.0 + 0.5 * x)
        + rng.standard_normal(n)
    )
    return Dataset(x.reshape(-1, 1), a, y.reshape(-1, 1), "binary"), truth


def generate_continuous(config):
    """Continuous-dose process with a Beta treatment and binary latent confounder."""
    truth = GroundTruth("continuous", config)
    rng = np.random.default_rng(config.seed)
    n, g = config.n, config.gamma
    x = rng.uniform(-1.0, 1.0, size=n)
    u = (rng.uniform(size=n) < 0.5).astype(np.float64)
    alpha = 2.0 + x + g * (u - 0.5)
    if np.any(alpha <= 0.0):
        raise ValueError("positivity failure: nonpositive Beta parameter encountered")
    a = rng.beta(alpha, alpha)
    y = (
        a
        + x * np.exp(-x * a)
        - 0.5 * (u - 0.5) * x
        + (0.5 * x + 1.0)
        + rng.standard_normal(n)
    )
    return Dataset(x.reshape(-1, 1), a, y.reshape(-1, 1), "continuous"), truth


def generate_semisynthetic(config):
    """Reweighted-propensity process over synthetic correlated covariates."""
    truth = GroundTruth("semisynthetic", config)
    rng = np.random.default_rng(config.seed)
    n, d_x = config.n, config.d_x
    if d_x < 3:
        raise ValueError("semisynthetic covariates need d_x >= 3")
    n_gauss = d_x - 2
    cov = 0.3 ** np.abs(np.subtract.outer(np.arange(n_gauss), np.arange(n_gauss)))
    x_gauss = rng.standard_normal((n, n_gauss)) @ np.linalg.cholesky(cov).T
    x_bin = np.column_stack(
        [
            (rng.uniform(size=n) < 0.5).astype(np.float64),
            (rng.uniform(size=n) < 0.3).astype(np.float64),
        ]
    )
    x = np.column_stack([x_gauss, x_bin])

    u = rng.uniform(size=n)
    pi = truth.observed_propensity(x)
    w = truth._semisynthetic_weight(x, u)
    full = w * pi
    if np.any((full < -1e-12) | (full > 1.0 + 1e-12)):
        raise ValueError("full propensity w(x, u) * pi(x) left [0, 1]")
    full = np.clip(full, 0.0, 1.0)
    a = (rng.uniform(size=n) < full).astype(np.float64)
    y = (2.0 * a - 1.0) * ((x.sum(axis=1) + u) / (d_x + 1)) + config.noise_scale * (
        rng.standard_normal(n)
    )
    return Dataset(x, a, y.reshape(-1, 1), "binary"), truth


# ---- oracle sensitivity parameters --------------------------------------------------


def _constraint_value(spec, weights, p_u_x, p_u_xa, pi_a, treatment_type):
    """Exact constraint value of the generative latent shift at one (x, a)."""
    ratio = p_u_x / p_u_xa
    if treatment_type == "continuous":
        rho = ratio
    else:
        q = spec.weight_value(pi_a) if spec.kind == "wmsm" else pi_a
        rho = (ratio - q) / (1.0 - q)
    if np.any(rho <= 0.0):
        raise ValueError("positivity failure: nonpositive latent density ratio")
    if spec.kind in ("msm", "cmsm", "wmsm"):
        return float(max(rho.max(), (1.0 / rho).max()))
    if spec.kind == "f":
        direct = float(np.sum(weights * p_u_xa * f_function(spec.f, rho)))
        reverse = float(np.sum(weights * p_u_xa * f_function(spec.f, 1.0 / rho)))
        return max(direct, reverse)
    if spec.kind == "rosenbaum":
        return float(rho.max() / rho.min())
    raise ValueError(f"unknown sensitivity kind: {spec.kind!r}")


def oracle_gamma(ground_truth, spec, x, a, u_grid_size=201):
    """Smallest sensitivity parameter whose constraint holds at one (x, a)."""
    treatment_type = "continuous" if ground_truth.kind == "continuous" else "binary"
    _, weights, p_u_x, p_u_xa, pi_a = ground_truth.latent_shift_densities(
        x, a, u_grid_size=u_grid_size
    )
    return _constraint_value(spec, weights, p_u_x, p_u_xa, pi_a, treatment_type)


def oracle_gamma_uniform(ground_truth, spec, x_grid, arms, u_grid_size=201):
    """Largest per-point oracle value over a grid: the uniform-validity parameter."""
    values = [
        oracle_gamma(ground_truth, spec, np.atleast_1d(x), a, u_grid_size)
        for x in x_grid
        for a in arms
    ]
    return float(np.max(values))


def oracle_gamma_averaged(ground_truth, spec, a, n_cells=101, u_grid_size=201):
    """Average of the per-point oracle over x ~ U(-1, 1) (midpoint quadrature)."""
    mids = -1.0 + (np.arange(n_cells) + 0.5) * (2.0 / n_cells)
    values = [oracle_gamma(ground_truth, spec, np.array([x]), a, u_grid_size) for x in mids]
    return float(np.mean(values))


def oracle_gamma_median(ground_truth, spec, x_test, u_grid_size=201):
    """Median over test points of the per-point oracle, maximized over both arms."""
    values = [
        max(
            oracle_gamma(ground_truth, spec, x, 1.0, u_grid_size),
            oracle_gamma(ground_truth, spec, x, 0.0, u_grid_size),
        )
        for x in np.atleast_2d(x_test)
    ]
    return float(np.median(values))
