"""Causal query functionals and their Monte-Carlo Stage-2 losses.

Three query families are supported: expectations of one outcome coordinate,
probabilities of axis-aligned regions, and quantiles of one coordinate. Each
has a differentiable training loss (the expectation is a plain sample mean;
region and quantile queries maximize the shifted distribution's log-likelihood
restricted to samples inside the target set, with no gradient through the
membership indicator) and a plain Monte-Carlo evaluator.

``stage2_loss`` returns the quantity the trainer maximizes: it is sign-flipped
for lower bounds, and for quantile queries the restricted-likelihood surrogate
enters negatively because raising a quantile means draining mass from the
sub-level set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad

__all__ = [
    "QuerySpec",
    "QueryEvaluationBatch",
    "build_query_batch",
    "stage2_loss",
    "evaluate_query",
    "evaluate_query_with_se",
    "shifted_outcome_log_prob",
    "average_bounds",
    "difference_bounds",
]

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class QuerySpec:
    """What to bound: the functional, its target, and the bound direction."""

    functional: str  # "expectation" | "set_prob" | "quantile"
    direction: str = "upper"
    outcome_index: int = 0
    region: Optional[Tuple[Tuple[float, float], ...]] = None  # original units
    level: Optional[float] = None

    def __post_init__(self):
        if self.functional not in ("expectation", "set_prob", "quantile"):
            raise ValueError(f"unknown functional: {self.functional!r}")
        if self.direction not in ("upper", "lower"):
            raise ValueError(f"direction must be 'upper' or 'lower', got {self.direction!r}")
        if self.functional == "set_prob":
            if not self.region:
                raise ValueError("set_prob query needs a region")
            for lo, hi in self.region:
                if not lo < hi:
                    raise ValueError(f"empty region side: [{lo}, {hi}]")
        if self.functional == "quantile":
            if self.level is None or not 0.0 < self.level < 1.0:
                raise ValueError("quantile level must lie strictly inside (0, 1)")

    def with_direction(self, direction):
        return QuerySpec(self.functional, direction, self.outcome_index, self.region, self.level)

    def to_dict(self):
        out = {"type": self.functional, "direction": self.direction}
        if self.functional == "expectation":
            out["outcome_index"] = self.outcome_index
        if self.functional == "set_prob":
            out["region"] = [
                [None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi]
                for lo, hi in self.region
            ]
        if self.functional == "quantile":
            out["level"] = self.level
            out["outcome_index"] = self.outcome_index
        return out

    @staticmethod
    def from_dict(payload):
        region = payload.get("region")
        if region is not None:
            region = tuple(
                (
                    -np.inf if lo is None else float(lo),
                    np.inf if hi is None else float(hi),
                )
                for lo, hi in region
            )
        return QuerySpec(
            functional=payload["type"],
            direction=payload.get("direction", "upper"),
            outcome_index=int(payload.get("outcome_index", 0)),
            region=region,
            level=payload.get("level"),
        )


def region_membership(y, region):
    """Boolean mask of rows of `y` inside the closed axis-aligned region."""
    y = np.asarray(y)
    mask = np.ones(y.shape[:-1], dtype=bool)
    for dim, (lo, hi) in enumerate(region):
        mask &= (y[..., dim] >= lo) & (y[..., dim] <= hi)
    return mask


@dataclass
class QueryEvaluationBatch:
    """Latent draws plus everything pushed through the current Stage-2 flow."""

    x: np.ndarray  # (n, d_x)
    a: np.ndarray  # (n,)
    u_tilde: np.ndarray  # (n, k, d_y)
    xi: np.ndarray  # (n, k); identically zero for continuous treatments
    pi: np.ndarray  # (n,) propensity of the unit's own treatment
    mixed: Tensor  # (n*k, d_y) latent points after Bernoulli mixing
    y_std: Tensor  # (n*k, d_y) pushed outcomes, standardized units
    logdet_fwd: Tensor  # (n*k,) log|det| of the Stage-1 forward map at `mixed`
    y_orig: np.ndarray  # (n, k, d_y) detached outcomes in original units

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def k(self):
        return self.u_tilde.shape[1]


def build_query_batch(stage1, stage2_flow, x, a, u_tilde, xi, pi):
    """Push latent draws through Stage 2 then Stage 1 (differentiable in eta)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    n, k, d_y = u_tilde.shape
    u_flat = u_tilde.reshape(n * k, d_y)
    pushed, _ = stage2_flow.forward(u_flat, x, a, tile=k)
    xi_col = xi.reshape(n * k, 1)
    mixed = Tensor(xi_col * u_flat) + (1.0 - xi_col) * pushed
    y_std, logdet_fwd = stage1.flow.forward(mixed, x, a, tile=k)
    y_orig = stage1.destandardize(y_std.data).reshape(n, k, d_y)
    return QueryEvaluationBatch(
        x=x, a=a, u_tilde=u_tilde, xi=np.asarray(xi), pi=np.asarray(pi),
        mixed=mixed, y_std=y_std, logdet_fwd=logdet_fwd, y_orig=y_orig,
    )


def _latent_shift_log_density(batch, stage2_flow, treatment_type):
    """Log-density of the shifted latent distribution at the mixed points."""
    n, k = batch.n, batch.k
    log_push = stage2_flow.log_prob(batch.mixed, batch.x, batch.a, tile=k)
    if treatment_type == "continuous":
        return log_push
    d_y = batch.u_tilde.shape[2]
    sq = (batch.mixed * batch.mixed).sum(axis=-1)
    phi = (-0.5 * sq - 0.5 * d_y * LOG_2PI).exp()
    pi_flat = np.repeat(batch.pi, k)
    mix = pi_flat * phi + (1.0 - pi_flat) * log_push.exp()
    return mix.maximum_const(1e-300).log()


def _restricted_loglik(batch, stage2_flow, treatment_type, mask):
    """Mean over samples of the shifted outcome log-likelihood inside the set."""
    loglik = _latent_shift_log_density(batch, stage2_flow, treatment_type) - batch.logdet_fwd
    empty_units = int(np.sum(~mask.any(axis=1)))
    if empty_units:
        log.warning("%d unit(s) have no Monte-Carlo samples inside the target set", empty_units)
    return (loglik * mask.reshape(-1).astype(np.float64)).mean()


def stage2_loss(query, batch, stage1, stage2_flow):
    """Differentiable training objective; the trainer always maximizes it."""
    treatment_type = stage1.treatment_type
    if query.functional == "expectation":
        ascent = batch.y_std[:, query.outcome_index].mean()
    elif query.functional == "set_prob":
        mask = region_membership(batch.y_orig, query.region)
        ascent = _restricted_loglik(batch, stage2_flow, treatment_type, mask)
    else:  # quantile: drain mass from the per-unit sub-level set to raise it
        col = batch.y_orig[:, :, query.outcome_index]
        cutoffs = np.quantile(col, query.level, axis=1, keepdims=True)
        mask = col <= cutoffs
        ascent = -_restricted_loglik(batch, stage2_flow, treatment_type, mask)
    return ascent if query.direction == "upper" else -ascent


def _draw_eval_batch(stage1, stage2_flow, x, a, k, seed, propensity):
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    a_arr = np.asarray(a, dtype=np.float64).reshape(1)
    rng = np.random.default_rng(seed)
    d_y = stage1.d_y
    u = rng.standard_normal((1, k, d_y))
    if stage1.treatment_type == "binary":
        pi = _propensity_of(propensity, x, a_arr)
        xi = (rng.uniform(size=(1, k)) < pi).astype(np.float64)
    else:
        pi = 1.0
        xi = np.zeros((1, k))
    with no_grad():
        batch = build_query_batch(stage1, stage2_flow, x, a_arr, u, xi, np.array([pi]))
    return batch


def _propensity_of(propensity, x, a):
    if propensity is None:
        raise ValueError("binary-treatment evaluation needs a propensity (value or model)")
    if isinstance(propensity, (int, float)):
        return float(propensity)
    if callable(propensity) and not hasattr(propensity, "propensity"):
        return float(propensity(x[0], a[0]))
    return float(propensity.propensity(x, a)[0])


def _apply_functional(query, samples):
    """samples: (k, d_y) outcomes in original units."""
    if query.functional == "expectation":
        return float(samples[:, query.outcome_index].mean())
    if query.functional == "set_prob":
        return float(region_membership(samples, query.region).mean())
    return float(np.quantile(samples[:, query.outcome_index], query.level))


def evaluate_query(query, stage1, stage2_flow, x, a, k, seed, propensity=None):
    """Monte-Carlo value of the query under the shifted distribution at (x, a)."""
    if k < 100:
        raise ValueError("k must be at least 100 for query evaluation")
    batch = _draw_eval_batch(stage1, stage2_flow, x, a, k, seed, propensity)
    return _apply_functional(query, batch.y_orig[0])


def evaluate_query_with_se(query, stage1, stage2_flow, x, a, k, seed, propensity=None, folds=10):
    """Query value plus a fold-based Monte-Carlo standard error."""
    if k < 100:
        raise ValueError("k must be at least 100 for query evaluation")
    batch = _draw_eval_batch(stage1, stage2_flow, x, a, k, seed, propensity)
    samples = batch.y_orig[0]
    value = _apply_functional(query, samples)
    fold_vals = [
        _apply_functional(query, samples[f::folds]) for f in range(folds)
    ]
    se = float(np.std(fold_vals, ddof=1) / np.sqrt(folds))
    return value, se


def shifted_outcome_log_prob(stage1, stage2_flow, y, x, a, propensity=None):
    """Log-density of the shifted outcome distribution in original units.

    y: (m, d_y) points; x, a: one conditioning point. Used for density plots
    and quadrature checks of the learned Stage-2 distribution.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    m = y.shape[0]
    x_row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    a_row = np.asarray(a, dtype=np.float64).reshape(1)
    y_std = stage1.standardize(y)
    with no_grad():
        u, logdet_inv = stage1.flow.inverse(y_std, x_row, a_row, tile=m)
        log_push = stage2_flow.log_prob(u.data, x_row, a_row, tile=m)
    log_phi = -0.5 * np.sum(u.data**2, axis=1) - 0.5 * stage1.d_y * LOG_2PI
    if stage1.treatment_type == "continuous":
        latent = log_push.data
    else:
        pi = _propensity_of(propensity, x_row, a_row)
        latent = np.log(
            np.maximum(pi * np.exp(log_phi) + (1.0 - pi) * np.exp(log_push.data), 1e-300)
        )
    return latent + logdet_inv.data - float(np.sum(np.log(stage1.y_std)))


def average_bounds(per_x_bounds):
    """Weighted average of per-point intervals; weights form a distribution."""
    items = list(per_x_bounds)
    if not items:
        raise ValueError("no bounds to average")
    weights = np.array([w for w, _, _ in items], dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    if abs(weights.sum() - 1.0) > 1e-8:
        raise ValueError(f"weights must sum to 1, got {weights.sum()}")
    lower = float(sum(w * lo for w, lo, _ in items))
    upper = float(sum(w * hi for w, _, hi in items))
    return lower, upper


def difference_bounds(bounds_a1, bounds_a2):
    """Interval for Q(a1) - Q(a2) from per-arm intervals."""
    lo1, hi1 = bounds_a1
    lo2, hi2 = bounds_a2
    return lo1 - hi2, hi1 - lo2
