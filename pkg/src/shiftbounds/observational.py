"""Stage 1: fit the observational outcome distribution and the propensity model.

The outcome model is a conditional spline flow trained by maximum likelihood
on standardized outcomes; the standardization statistics live in the fitted
model so densities and samples can be reported in original units. The
propensity model is a softmax classifier for binary treatments and a
one-dimensional conditional flow (density of ``a`` given ``x``) for
continuous ones.

Fitted models are frozen: Stage 2 reads them but never mutates them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .data import Dataset
from .flows import ConditionalFlow, FlowConfig, flow_from_dict, flow_to_dict
from .networks import Adam, Mlp

__all__ = [
    "TrainConfig",
    "PropensityNetConfig",
    "TrainingDiverged",
    "Stage1Model",
    "PropensityModel",
    "fit_stage1",
    "fit_propensity",
    "save_stage1",
    "load_stage1",
    "save_propensity",
    "load_propensity",
]

PROPENSITY_CLAMP = 1e-3

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last finite model."""

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class PropensityNetConfig:
    hidden_units: int = 20
    hidden_layers: int = 3


class Stage1Model:
    """Fitted observational outcome distribution P(Y | x, a)."""

    def __init__(self, flow, y_mean, y_std, treatment_type, meta=None):
        self.flow = flow
        self.y_mean = np.asarray(y_mean, dtype=np.float64).reshape(-1)
        self.y_std = np.asarray(y_std, dtype=np.float64).reshape(-1)
        self.treatment_type = treatment_type
        self.meta = dict(meta or {})

    @property
    def d_y(self):
        return self.flow.d_y

    @property
    def d_x(self):
        return self.flow.d_x

    def standardize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def destandardize(self, y_std):
        return np.asarray(y_std, dtype=np.float64) * self.y_std + self.y_mean

    def log_prob(self, y, x, a, tile=1):
        """Log-density in original outcome units (plain arrays in, Tensor out)."""
        y_std = self.standardize(y)
        lp = self.flow.log_prob(y_std, x, a, tile=tile)
        return lp - float(np.sum(np.log(self.y_std)))

    def sample(self, x, a, count, rng):
        return self.destandardize(self.flow.sample(x, a, count, rng))


class PropensityModel:
    """Fitted treatment model: P(A = a | x) (probability or density)."""

    def __init__(self, kind, net=None, flow=None, a_mean=0.0, a_std=1.0, meta=None):
        if kind not in ("binary", "continuous"):
            raise ValueError(f"unknown propensity kind: {kind!r}")
        self.kind = kind
        self.net = net
        self.flow = flow
        self.a_mean = float(a_mean)
        self.a_std = float(a_std)
        self.meta = dict(meta or {})

    def prob_treated(self, x):
        """P(A = 1 | x) for binary treatments, clamped away from 0 and 1."""
        if self.kind != "binary":
            raise ValueError("prob_treated is only defined for binary treatments")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with no_grad():
            logits = self.net(x).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p1 = e[:, 1] / e.sum(axis=1)
        return np.clip(p1, PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)

    def propensity(self, x, a):
        """P(A = a | x): a probability (binary) or a density value (continuous)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if self.kind == "binary":
            p1 = self.prob_treated(x)
            return np.where(a > 0.5, p1, 1.0 - p1)
        a_std = (a - self.a_mean) / self.a_std
        with no_grad():
            lp = self.flow.log_prob(a_std.reshape(-1, 1), x, None).data
        return np.exp(lp) / self.a_std


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p.data = s.copy()


def fit_stage1(dataset, flow_config=None, train_config=None):
    """Fit the Stage-1 conditional flow by maximum likelihood."""
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    flow_config = flow_config or FlowConfig()
    cfg = train_config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)

    y_mean = dataset.y.mean(axis=0)
    y_std = dataset.y.std(axis=0)
    y_std = np.where(y_std < 1e-8, 1.0, y_std)

    train, val = dataset.split(cfg.val_fraction, rng)
    y_tr = (train.y - y_mean) / y_std
    y_va = (val.y - y_mean) / y_std if val.n else None

    flow = ConditionalFlow(dataset.d_x, 1, dataset.d_y, flow_config, seed=cfg.seed)
    opt = Adam(flow.parameters(), lr=cfg.learning_rate)
    curve = []
    snap = _snapshot(flow.parameters())
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train.n)
        epoch_losses = []
        for start in range(0, train.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            lp = flow.log_prob(y_tr[idx], train.x[idx], train.a[idx])
            loss = -lp.mean()
            value = float(loss.data)
            if not np.isfinite(value):
                _restore(flow.parameters(), snap)
                model = Stage1Model(
                    flow, y_mean, y_std, dataset.treatment_type,
                    meta={"epochs": epoch, "diverged": True, "seed": cfg.seed},
                )
                raise TrainingDiverged(
                    f"non-finite stage-1 loss at epoch {epoch}", model=model
                )
            loss.backward()
            opt.step()
            epoch_losses.append(value)
        curve.append(float(np.mean(epoch_losses)))
        snap = _snapshot(flow.parameters())

    meta = {
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "final_train_loss": curve[-1] if curve else None,
        "loss_curve": curve,
        "n_train": train.n,
        "n_val": val.n,
    }
    if y_va is not None and val.n:
        with no_grad():
            meta["final_val_loss"] = float(-flow.log_prob(y_va, val.x, val.a).mean().data)
    return Stage1Model(flow, y_mean, y_std, dataset.treatment_type, meta=meta)


def fit_propensity(dataset, net_config=None, train_config=None):
    """Fit P(a | x): softmax classifier (binary) or conditional flow (continuous)."""
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    net_config = net_config or PropensityNetConfig()
    cfg = train_config or TrainConfig(epochs=30)
    rng = np.random.default_rng(cfg.seed)

    if dataset.treatment_type == "binary":
        labels = dataset.a.astype(np.intp)
        if labels.min() == labels.max():
            raise ValueError("single-class treatment data: positivity violated")
        net = Mlp(
            dataset.d_x,
            [net_config.hidden_units] * net_config.hidden_layers,
            2,
            rng,
        )
        opt = Adam(net.parameters(), lr=cfg.learning_rate)
        curve = []
        for epoch in range(cfg.epochs):
            perm = rng.permutation(dataset.n)
            epoch_losses = []
            for start in range(0, dataset.n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                probs = net(dataset.x[idx]).softmax(axis=-1)
                picked = probs.gather_last(labels[idx][:, None]).maximum_const(1e-12)
                loss = -picked.log().mean()
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite propensity loss at epoch {epoch}")
                loss.backward()
                opt.step()
                epoch_losses.append(value)
            curve.append(float(np.mean(epoch_losses)))
        meta = {"epochs": cfg.epochs, "seed": cfg.seed, "loss_curve": curve}
        return PropensityModel("binary", net=net, meta=meta)

    # Continuous treatment: 1-D conditional flow for the density of a given x.
    a_mean = float(dataset.a.mean())
    a_std = float(dataset.a.std())
    if a_std < 1e-8:
        raise ValueError("degenerate continuous treatment: positivity violated")
    a_std_values = ((dataset.a - a_mean) / a_std).reshape(-1, 1)
    flow = ConditionalFlow(dataset.d_x, 0, 1, FlowConfig(), seed=cfg.seed)
    opt = Adam(flow.parameters(), lr=cfg.learning_rate)
    curve = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(dataset.n)
        epoch_losses = []
        for start in range(0, dataset.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = -flow.log_prob(a_std_values[idx], dataset.x[idx], None).mean()
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite propensity loss at epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_losses.append(value)
        curve.append(float(np.mean(epoch_losses)))
    meta = {"epochs": cfg.epochs, "seed": cfg.seed, "loss_curve": curve}
    return PropensityModel("continuous", flow=flow, a_mean=a_mean, a_std=a_std, meta=meta)


# ---- checkpoints ------------------------------------------------------------------


def stage1_to_dict(model):
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "stage1",
        "flow": flow_to_dict(model.flow),
        "y_mean": list(map(float, model.y_mean)),
        "y_std": list(map(float, model.y_std)),
        "treatment_type": model.treatment_type,
        "meta": model.meta,
    }


def stage1_from_dict(payload):
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "stage1":
        raise ValueError("not a stage-1 checkpoint")
    return Stage1Model(
        flow_from_dict(payload["flow"]),
        np.array(payload["y_mean"]),
        np.array(payload["y_std"]),
        payload["treatment_type"],
        meta=payload.get("meta"),
    )


def save_stage1(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stage1_to_dict(model), fh)


def load_stage1(path):
    with open(path, "r", encoding="utf-8") as fh:
        return stage1_from_dict(json.load(fh))


def propensity_to_dict(model):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "propensity",
        "propensity_kind": model.kind,
        "meta": model.meta,
    }
    if model.kind == "binary":
        payload["sizes"] = model.net.sizes
        payload["weights"] = [w.data.tolist() for w in model.net.weights]
        payload["biases"] = [b.data.tolist() for b in model.net.biases]
    else:
        payload["flow"] = flow_to_dict(model.flow)
        payload["a_mean"] = model.a_mean
        payload["a_std"] = model.a_std
    return payload


def propensity_from_dict(payload):
    if payload.get("format_version") != CHECKPOINT_VERSION or payload.get("kind") != "propensity":
        raise ValueError("not a propensity checkpoint")
    if payload["propensity_kind"] == "binary":
        sizes = payload["sizes"]
        net = Mlp(sizes[0], sizes[1:-1], sizes[-1], np.random.default_rng(0))
        for w, data in zip(net.weights, payload["weights"]):
            w.data = np.array(data, dtype=np.float64)
        for b, data in zip(net.biases, payload["biases"]):
            b.data = np.array(data, dtype=np.float64)
        return PropensityModel("binary", net=net, meta=payload.get("meta"))
    return PropensityModel(
        "continuous",
        flow=flow_from_dict(payload["flow"]),
        a_mean=payload["a_mean"],
        a_std=payload["a_std"],
        meta=payload.get("meta"),
    )


def save_propensity(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(propensity_to_dict(model), fh)


def load_propensity(path):
    with open(path, "r", encoding="utf-8") as fh:
        return propensity_from_dict(json.load(fh))
