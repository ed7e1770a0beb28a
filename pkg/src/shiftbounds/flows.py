"""Conditional spline flows: invertible maps from a standard normal latent.

A :class:`ConditionalFlow` couples a masked hypernetwork (emitting raw spline
parameters from ``(x, a)`` and earlier outcome dimensions) with per-dimension
rational-quadratic splines. The map is autoregressive: inverting outcome
dimension ``j`` only ever reads dimensions ``<= j``, so the Jacobian is
triangular and the change-of-variables log-density is a sum of per-dimension
log-derivatives.

Flows are immutable after construction as far as evaluation is concerned;
training mutates the parameter tensors through an optimizer that owns them.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from . import splines
from .autodiff import Tensor, as_tensor, concat, no_grad
from .networks import MaskedHypernet

__all__ = [
    "FlowConfig",
    "ConditionalFlow",
    "transform_forward",
    "transform_inverse",
    "conditional_log_prob",
    "conditional_sample",
    "flow_to_dict",
    "flow_from_dict",
    "save_flow",
    "load_flow",
]

LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FlowConfig:
    num_bins: int = 4
    tail_bound: float = 10.0
    hidden_units: int = 20

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValueError(f"num_bins must be >= 1, got {self.num_bins}")
        if self.tail_bound <= 0:
            raise ValueError(f"tail_bound must be positive, got {self.tail_bound}")


def _as_cond(x, a):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a is None:
        return x
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    if x.shape[0] != a.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows but a has {a.shape[0]}")
    return np.concatenate([x, a], axis=1)


class ConditionalFlow:
    """Invertible transform u <-> y conditioned on covariates and treatment."""

    def __init__(self, d_x, d_a, d_y, config=FlowConfig(), seed=0):
        if d_a not in (0, 1):
            raise ValueError("treatments are scalar: d_a must be 0 or 1")
        self.d_x = int(d_x)
        self.d_a = int(d_a)
        self.d_y = int(d_y)
        self.config = config
        self.conditioning_order = list(range(self.d_y))
        rng = np.random.default_rng(seed)
        self.net = MaskedHypernet(
            d_cond=self.d_x + self.d_a,
            d_y=self.d_y,
            block_size=splines.params_per_dim(config.num_bins),
            hidden_units=config.hidden_units,
            rng=rng,
            output_bias=splines.identity_raw_params(config.num_bins),
        )

    def parameters(self):
        return self.net.parameters()

    def parameter_vector(self):
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_parameter_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for p in self.parameters():
            n = p.data.size
            p.data = vec[offset : offset + n].reshape(p.data.shape).copy()
            offset += n
        if offset != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {offset}")

    # ---- core maps -------------------------------------------------------------
    def forward(self, u, x, a, tile=1):
        """Push latent points through the flow: returns (y, log|det dy/du|).

        u: Tensor or array (n, d_y); x, a: arrays with n // tile rows, each row
        reused for `tile` consecutive latent points.
        """
        u = as_tensor(u)
        cond = _as_cond(x, a)
        n = u.shape[0]
        if cond.shape[0] * tile != n:
            raise ValueError("conditioning rows times tile must match latent rows")
        cfg = self.config
        if self.d_y == 1:
            params = self.net(cond, None)[:, 0, :]
            knots = splines.knots_from_raw(params, cfg.num_bins, cfg.tail_bound)
            y, ld = splines.spline_forward_knots(u[:, 0], knots.repeat_rows(tile))
            return y.reshape(n, 1), ld
        cond_full = np.repeat(cond, tile, axis=0) if tile > 1 else cond
        y_cols = []
        log_det = Tensor(np.zeros(n))
        for j in range(self.d_y):
            if y_cols:
                partial = concat(
                    [c.reshape(n, 1) for c in y_cols]
                    + [Tensor(np.zeros((n, self.d_y - len(y_cols))))],
                    axis=-1,
                )
            else:
                partial = None
            params = self.net(cond_full, partial)[:, j, :]
            y_j, ld_j = splines.spline_forward(u[:, j], params, cfg.num_bins, cfg.tail_bound)
            y_cols.append(y_j)
            log_det = log_det + ld_j
        y = concat([c.reshape(n, 1) for c in y_cols], axis=-1)
        return y, log_det

    def inverse(self, y, x, a, tile=1):
        """Pull data points back to the latent space: returns (u, log|det du/dy|)."""
        y = as_tensor(y)
        cond = _as_cond(x, a)
        n = y.shape[0]
        if cond.shape[0] * tile != n:
            raise ValueError("conditioning rows times tile must match data rows")
        cfg = self.config
        if self.d_y == 1:
            params = self.net(cond, None)[:, 0, :]
            knots = splines.knots_from_raw(params, cfg.num_bins, cfg.tail_bound)
            u, ld = splines.spline_inverse_knots(y[:, 0], knots.repeat_rows(tile))
            return u.reshape(n, 1), ld
        cond_full = np.repeat(cond, tile, axis=0) if tile > 1 else cond
        all_params = self.net(cond_full, y)
        u_cols = []
        log_det = Tensor(np.zeros(n))
        for j in range(self.d_y):
            u_j, ld_j = splines.spline_inverse(
                y[:, j], all_params[:, j, :], cfg.num_bins, cfg.tail_bound
            )
            u_cols.append(u_j.reshape(n, 1))
            log_det = log_det + ld_j
        return concat(u_cols, axis=-1), log_det

    def log_prob(self, y, x, a, tile=1):
        """Change-of-variables log-density of the pushforward of N(0, I)."""
        u, ld = self.inverse(y, x, a, tile=tile)
        base = -0.5 * (u * u).sum(axis=-1) - 0.5 * self.d_y * LOG_2PI
        return base + ld

    def sample(self, x, a, count, rng):
        """Draw `count` outcomes at a single conditioning point (plain arrays)."""
        u = rng.standard_normal((count, self.d_y))
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        a = np.asarray(a, dtype=np.float64).reshape(1)
        with no_grad():
            y, _ = self.forward(u, x, a, tile=count)
        return y.data


# ---- spec-level operations (single conditioning point) --------------------------


def _check_finite(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")
    return arr


def _check_flow(flow):
    for p in flow.parameters():
        if not np.all(np.isfinite(p.data)):
            raise ValueError("non-finite flow parameters")


def transform_forward(flow, u, x, a):
    """Map one latent vector to an outcome: returns (y, log|det dy/du|)."""
    u = _check_finite("u", u).reshape(1, -1)
    x = _check_finite("x", x)
    a = _check_finite("a", a)
    _check_flow(flow)
    with no_grad():
        y, ld = flow.forward(u, x.reshape(1, -1), np.reshape(a, 1))
    return y.data[0], float(ld.data[0])


def transform_inverse(flow, y, x, a):
    """Map one outcome back to the latent space: returns (u, log|det du/dy|)."""
    y = _check_finite("y", y).reshape(1, -1)
    x = _check_finite("x", x)
    a = _check_finite("a", a)
    _check_flow(flow)
    with no_grad():
        u, ld = flow.inverse(y, x.reshape(1, -1), np.reshape(a, 1))
    return u.data[0], float(ld.data[0])


def conditional_log_prob(flow, y, x, a):
    """Log-density of the flow's conditional outcome distribution at one point."""
    y = _check_finite("y", y).reshape(1, -1)
    x = _check_finite("x", x)
    a = _check_finite("a", a)
    _check_flow(flow)
    with no_grad():
        lp = flow.log_prob(y, x.reshape(1, -1), np.reshape(a, 1))
    return float(lp.data[0])


def conditional_sample(flow, x, a, count, rng_seed):
    """Reproducible i.i.d. samples from the conditional outcome distribution."""
    if count < 1:
        raise ValueError("count must be >= 1")
    _check_flow(flow)
    rng = np.random.default_rng(rng_seed)
    return flow.sample(x, a, count, rng)


# ---- checkpoint format ------------------------------------------------------------


def flow_to_dict(flow):
    vec = flow.parameter_vector().astype("<f8")
    return {
        "format_version": CHECKPOINT_VERSION,
        "d_x": flow.d_x,
        "d_a": flow.d_a,
        "d_y": flow.d_y,
        "num_bins": flow.config.num_bins,
        "tail_bound": flow.config.tail_bound,
        "layer_sizes": [flow.d_x + flow.d_a + flow.d_y,
                        flow.config.hidden_units,
                        flow.config.hidden_units,
                        flow.d_y * splines.params_per_dim(flow.config.num_bins)],
        "conditioning_order": flow.conditioning_order,
        "params_b64": base64.b64encode(vec.tobytes()).decode("ascii"),
    }


def flow_from_dict(payload):
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version!r}")
    config = FlowConfig(
        num_bins=int(payload["num_bins"]),
        tail_bound=float(payload["tail_bound"]),
        hidden_units=int(payload["layer_sizes"][1]),
    )
    flow = ConditionalFlow(
        d_x=int(payload["d_x"]),
        d_a=int(payload["d_a"]),
        d_y=int(payload["d_y"]),
        config=config,
        seed=0,
    )
    vec = np.frombuffer(base64.b64decode(payload["params_b64"]), dtype="<f8")
    flow.set_parameter_vector(vec)
    return flow


def save_flow(flow, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(flow_to_dict(flow), fh)


def load_flow(path):
    with open(path, "r", encoding="utf-8") as fh:
        return flow_from_dict(json.load(fh))
