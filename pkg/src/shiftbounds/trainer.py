"""Stage 2: constrained training of the latent-shift flow.

The trainer runs the nested augmented-Lagrangian loop: inner steps take
adaptive-moment gradient steps on the penalized objective

    J(eta) = -L2(eta) - mean_i lambda_i * s_i(eta) + (mu / 2) * mean_i s_i(eta)^2,

where ``L2`` is the (direction-signed) query loss and ``s_i = Gamma - D_i`` is
the per-unit constraint slack estimated on the same latent draws; outer steps
update the multipliers ``lambda`` per coarse (x, a) cell and grow ``mu``
geometrically. Constraint values are always re-checked on fresh draws before a
model is accepted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .autodiff import Tensor, concat, no_grad, where
from .flows import ConditionalFlow, flow_from_dict, flow_to_dict
from .networks import Adam
from .observational import TrainingDiverged
from .queries import (
    QuerySpec,
    build_query_batch,
    evaluate_query_with_se,
    stage2_loss,
)
from .sensitivity import DENSITY_FLOOR, ROSENBAUM_PAIR_BUDGET, SensitivitySpec, f_function

__all__ = [
    "AugLagConfig",
    "Stage2Model",
    "BoundsResult",
    "train_stage2",
    "compute_bounds",
    "constraint_estimates_batch",
    "save_stage2",
    "load_stage2",
]

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AugLagConfig:
    k: int = 256
    n_outer: int = 20
    n_inner: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-2
    mu0: float = 1.0
    alpha: float = 2.0
    lambda0: float = 0.0
    eps_constraint: float = 0.05
    n_lambda_bins: int = 10
    eval_units: int = 64

    def __post_init__(self):
        if self.alpha <= 1.0:
            raise ValueError("penalty growth factor alpha must exceed 1")
        if self.mu0 <= 0.0:
            raise ValueError("initial penalty mu0 must be positive")

    def to_dict(self):
        return {
            "k": self.k, "n1": self.n_outer, "n2": self.n_inner,
            "batch_size": self.batch_size, "lr": self.learning_rate,
            "mu0": self.mu0, "alpha": self.alpha, "lambda0": self.lambda0,
            "eps_constraint": self.eps_constraint,
            "n_lambda_bins": self.n_lambda_bins, "eval_units": self.eval_units,
        }

    @staticmethod
    def from_dict(payload):
        return AugLagConfig(
            k=int(payload.get("k", 256)),
            n_outer=int(payload.get("n1", 20)),
            n_inner=int(payload.get("n2", 100)),
            batch_size=int(payload.get("batch_size", 32)),
            learning_rate=float(payload.get("lr", 1e-2)),
            mu0=float(payload.get("mu0", 1.0)),
            alpha=float(payload.get("alpha", 2.0)),
            lambda0=float(payload.get("lambda0", 0.0)),
            eps_constraint=float(payload.get("eps_constraint", 0.05)),
            n_lambda_bins=int(payload.get("n_lambda_bins", 10)),
            eval_units=int(payload.get("eval_units", 64)),
        )


def constraint_estimates_batch(spec, stage2_flow, x, a, u, pi, treatment_type):
    """Per-unit constraint values D_i; differentiable (n,) Tensor.

    u: (n, k, d_y) latent draws; pi: (n,) propensities of each unit's own
    treatment. The latent shifted density is the Bernoulli mixture for binary
    treatments and the raw pushforward for continuous ones.
    """
    n, k, d_y = u.shape
    u_flat = u.reshape(n * k, d_y)
    log_push = stage2_flow.log_prob(u_flat, x, a, tile=k).reshape(n, k)
    log_phi = -0.5 * np.sum(u**2, axis=2) - 0.5 * d_y * LOG_2PI

    push = log_push.exp()
    phi = np.exp(log_phi)
    if treatment_type == "continuous":
        rho = (push.maximum_const(DENSITY_FLOOR) / np.maximum(phi, DENSITY_FLOOR))
    else:
        pi_col = np.asarray(pi, dtype=np.float64).reshape(n, 1)
        if np.any((pi_col <= 0) | (pi_col >= 1)):
            raise ValueError("positivity violated: propensity outside (0, 1)")
        mix = Tensor(pi_col * phi) + (1.0 - pi_col) * push
        if np.any(~np.isfinite(mix.data)):
            raise ValueError("degenerate mixture density in constraint estimation")
        q = np.array(
            [spec.weight_value(p) for p in pi_col[:, 0]] if spec.kind == "wmsm" else pi_col[:, 0]
        ).reshape(n, 1)
        rho = (mix.maximum_const(DENSITY_FLOOR) / np.maximum(phi, DENSITY_FLOOR) - q) / (1.0 - q)
    rho = rho.maximum_const(DENSITY_FLOOR)

    if spec.kind in ("msm", "cmsm", "wmsm"):
        return concat([rho, 1.0 / rho], axis=1).max(axis=1)
    if spec.kind == "f":
        direct = f_function(spec.f, rho).mean(axis=1)
        reverse = f_function(spec.f, 1.0 / rho).mean(axis=1)
        return where(direct.data >= reverse.data, direct, reverse)
    if spec.kind == "rosenbaum":
        b = min(k, ROSENBAUM_PAIR_BUDGET)
        rho_b = rho[:, :b]
        pair = rho_b.reshape(n, 1, b) / rho_b.reshape(n, b, 1)
        return pair.reshape(n, b * b).max(axis=1)
    raise ValueError(f"unknown sensitivity kind: {spec.kind!r}")


@dataclass
class Stage2Model:
    """Trained latent-shift flow plus the contract it was trained for."""

    flow: ConditionalFlow
    spec: SensitivitySpec
    query: QuerySpec
    treatment_type: str
    trace: List[dict] = field(default_factory=list)
    feasible: bool = True
    eval_constraints: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def direction(self):
        return self.query.direction


class _LambdaBuckets:
    """Coarse multiplier cells: quantile bin of mean(x) crossed with the arm."""

    def __init__(self, x, a, treatment_type, n_bins, lambda0):
        scores = x.mean(axis=1)
        qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
        self.edges = np.quantile(scores, qs)
        self.n_bins = n_bins
        self.binary = treatment_type == "binary"
        size = n_bins * (2 if self.binary else 1)
        self.values = np.full(size, float(lambda0))

    def key(self, x, a):
        scores = np.atleast_2d(x).mean(axis=1)
        bins = np.searchsorted(self.edges, scores)
        if self.binary:
            arm = (np.asarray(a).reshape(-1) > 0.5).astype(np.intp)
            return bins + self.n_bins * arm
        return bins

    def lookup(self, x, a):
        return self.values[self.key(x, a)]

    def update(self, x, a, slacks, mu):
        keys = self.key(x, a)
        for b in np.unique(keys):
            worst = float(np.min(slacks[keys == b]))
            self.values[b] = max(0.0, self.values[b] - mu * worst)


def _unit_propensities(propensity, x, a, treatment_type):
    if treatment_type == "continuous":
        return np.ones(len(a))
    if propensity is None:
        raise ValueError("binary-treatment training needs a propensity model")
    if callable(propensity) and not hasattr(propensity, "propensity"):
        return np.array([float(propensity(x[i], a[i])) for i in range(len(a))])
    return propensity.propensity(x, a)


def train_stage2(
    stage1,
    propensity,
    spec,
    query,
    dataset,
    auglag_config=None,
    seed=0,
    flow_config=None,
):
    """Fit the Stage-2 flow for one (sensitivity model, query, direction)."""
    cfg = auglag_config or AugLagConfig()
    if dataset.treatment_type != stage1.treatment_type:
        raise ValueError(
            f"dataset treatment type {dataset.treatment_type!r} does not match "
            f"stage-1 model {stage1.treatment_type!r}"
        )
    flow_config = flow_config or stage1.flow.config
    d_y = stage1.d_y
    treatment_type = dataset.treatment_type

    ss = np.random.SeedSequence(seed)
    batch_rng, latent_rng, eval_rng = (np.random.default_rng(c) for c in ss.spawn(3))

    stage2_flow = ConditionalFlow(dataset.d_x, 1, d_y, flow_config, seed=seed)
    opt = Adam(stage2_flow.parameters(), lr=cfg.learning_rate)

    pi_all = _unit_propensities(propensity, dataset.x, dataset.a, treatment_type)
    buckets = _LambdaBuckets(dataset.x, dataset.a, treatment_type, cfg.n_lambda_bins, cfg.lambda0)
    mu = cfg.mu0
    gamma = spec.gamma

    n = dataset.n
    batch_size = min(cfg.batch_size, n)
    eval_idx = np.unique(np.linspace(0, n - 1, min(cfg.eval_units, n)).astype(np.intp))
    x_eval, a_eval, pi_eval = dataset.x[eval_idx], dataset.a[eval_idx], pi_all[eval_idx]

    def eval_constraints(rng):
        u = rng.standard_normal((len(eval_idx), cfg.k, d_y))
        with no_grad():
            d_hat = constraint_estimates_batch(
                spec, stage2_flow, x_eval, a_eval, u, pi_eval, treatment_type
            )
        return d_hat.data

    trace = []
    for outer in range(cfg.n_outer):
        for inner in range(cfg.n_inner):
            idx = batch_rng.choice(n, size=batch_size, replace=False)
            xb, ab, pib = dataset.x[idx], dataset.a[idx], pi_all[idx]
            u = latent_rng.standard_normal((batch_size, cfg.k, d_y))
            if treatment_type == "binary":
                xi = (latent_rng.uniform(size=(batch_size, cfg.k)) < pib[:, None]).astype(
                    np.float64
                )
            else:
                xi = np.zeros((batch_size, cfg.k))

            batch = build_query_batch(stage1, stage2_flow, xb, ab, u, xi, pib)
            loss = stage2_loss(query, batch, stage1, stage2_flow)
            d_hat = constraint_estimates_batch(spec, stage2_flow, xb, ab, u, pib, treatment_type)
            slack = gamma - d_hat
            lam = buckets.lookup(xb, ab)
            objective = -loss - (Tensor(lam) * slack).mean() + (mu / 2.0) * (slack * slack).mean()
            value = float(objective.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite stage-2 objective at outer {outer}, inner {inner}"
                )
            objective.backward()
            opt.step()

        d_eval = eval_constraints(eval_rng)
        slack_eval = gamma - d_eval
        buckets.update(x_eval, a_eval, slack_eval, mu)
        trace.append(
            {
                "outer": outer,
                "mean_violation": float(np.mean(np.maximum(0.0, d_eval - gamma))),
                "max_constraint": float(np.max(d_eval)),
                "mean_constraint": float(np.mean(d_eval)),
                "mu": mu,
                "lambda_max": float(np.max(buckets.values)),
            }
        )
        mu *= cfg.alpha

    d_final = eval_constraints(eval_rng)
    tol = gamma * (1.0 + cfg.eps_constraint) + 0.1 * cfg.eps_constraint
    feasible = bool(np.all(d_final <= tol))
    if not feasible:
        log.warning(
            "stage-2 model infeasible: max fresh-sample constraint %.4f vs budget %.4f",
            float(np.max(d_final)), tol,
        )
    return Stage2Model(
        flow=stage2_flow,
        spec=spec,
        query=query,
        treatment_type=treatment_type,
        trace=trace,
        feasible=feasible,
        eval_constraints=d_final,
        meta={"seed": seed, "auglag": cfg.to_dict()},
    )


@dataclass
class BoundsResult:
    x: np.ndarray
    a: float
    lower: float
    upper: float
    constraint_lower: float
    constraint_upper: float
    se_lower: float
    se_upper: float


def compute_bounds(stage1, stage2_upper, stage2_lower, query, points, k, seed, propensity=None):
    """Evaluate per-point intervals from an upper/lower pair of Stage-2 models."""
    if stage2_upper.spec != stage2_lower.spec:
        raise ValueError("upper and lower models were trained for different sensitivity specs")
    base = query.with_direction("upper")
    if stage2_upper.query.with_direction("upper") != base or (
        stage2_lower.query.with_direction("upper") != base
    ):
        raise ValueError("stage-2 models were trained for a different query")
    if stage2_upper.query.direction != "upper" or stage2_lower.query.direction != "lower":
        raise ValueError("need one upper-trained and one lower-trained model")

    children = np.random.SeedSequence(seed).spawn(len(points))
    results = []
    for point_seed, (x, a) in zip(children, points):
        seeds = point_seed.spawn(4)
        upper, se_u = evaluate_query_with_se(
            query.with_direction("upper"), stage1, stage2_upper.flow, x, a, k,
            seeds[0], propensity=propensity,
        )
        lower, se_l = evaluate_query_with_se(
            query.with_direction("lower"), stage1, stage2_lower.flow, x, a, k,
            seeds[1], propensity=propensity,
        )
        d_up = _fresh_constraint(stage2_upper, stage1, x, a, k, seeds[2], propensity)
        d_lo = _fresh_constraint(stage2_lower, stage1, x, a, k, seeds[3], propensity)
        results.append(
            BoundsResult(
                x=np.asarray(x, dtype=np.float64),
                a=float(np.asarray(a).reshape(-1)[0]),
                lower=lower,
                upper=upper,
                constraint_lower=d_lo,
                constraint_upper=d_up,
                se_lower=se_l,
                se_upper=se_u,
            )
        )
    return results


def _fresh_constraint(model, stage1, x, a, k, seed, propensity):
    rng = np.random.default_rng(seed)
    x_row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    a_row = np.asarray(a, dtype=np.float64).reshape(1)
    pi = _unit_propensities(propensity, x_row, a_row, model.treatment_type)
    u = rng.standard_normal((1, k, stage1.d_y))
    with no_grad():
        d_hat = constraint_estimates_batch(
            model.spec, model.flow, x_row, a_row, u, pi, model.treatment_type
        )
    return float(d_hat.data[0])


# ---- checkpoints ------------------------------------------------------------------


def stage2_to_dict(model):
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "stage2",
        "flow": flow_to_dict(model.flow),
        "sensitivity": model.spec.to_dict(),
        "query": model.query.to_dict(),
        "treatment_type": model.treatment_type,
        "trace": model.trace,
        "feasible": model.feasible,
        "eval_constraints": None
        if model.eval_constraints is None
        else [float(v) for v in model.eval_constraints],
        "meta": model.meta,
    }


def stage2_from_dict(payload):
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "stage2":
        raise ValueError("not a stage-2 checkpoint")
    ev = payload.get("eval_constraints")
    return Stage2Model(
        flow=flow_from_dict(payload["flow"]),
        spec=SensitivitySpec.from_dict(payload["sensitivity"]),
        query=QuerySpec.from_dict(payload["query"]),
        treatment_type=payload["treatment_type"],
        trace=payload.get("trace", []),
        feasible=bool(payload.get("feasible", True)),
        eval_constraints=None if ev is None else np.asarray(ev),
        meta=payload.get("meta", {}),
    )


def save_stage2(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stage2_to_dict(model), fh)


def load_stage2(path):
    with open(path, "r", encoding="utf-8") as fh:
        return stage2_from_dict(json.load(fh))
