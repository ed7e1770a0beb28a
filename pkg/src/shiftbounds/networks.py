"""Conditioner networks and the optimizer used by both training stages.

The hypernetwork is a masked fully connected net (two hidden ReLU layers,
linear output) that maps ``[x, a, y]`` to all spline parameters at once.
Masks enforce the autoregressive order over outcome dimensions: the parameter
block of outcome dimension ``j`` may read ``x``, ``a`` and outcomes with index
``< j`` only. With a single outcome dimension every ``y`` connection is masked
away and the conditioner is an ordinary MLP on ``(x, a)``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["MaskedHypernet", "Mlp", "Adam"]


def _he_init(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class MaskedHypernet:
    """MADE-style conditioner emitting per-dimension spline parameter blocks."""

    def __init__(self, d_cond, d_y, block_size, hidden_units, rng, output_bias=None):
        self.d_cond = int(d_cond)
        self.d_y = int(d_y)
        self.block_size = int(block_size)
        self.hidden_units = int(hidden_units)

        d_in = self.d_cond + self.d_y
        d_out = self.d_y * self.block_size
        deg_in = np.concatenate([np.zeros(self.d_cond), np.arange(1, self.d_y + 1)])
        deg_hidden = np.arange(hidden_units) % max(self.d_y, 1)
        deg_out = np.repeat(np.arange(1, self.d_y + 1), self.block_size)

        self.mask1 = (deg_in[:, None] <= deg_hidden[None, :]).astype(np.float64)
        self.mask2 = (deg_hidden[:, None] <= deg_hidden[None, :]).astype(np.float64)
        self.mask3 = (deg_hidden[:, None] < deg_out[None, :]).astype(np.float64)

        self.w1 = Tensor(_he_init(rng, d_in, hidden_units) * self.mask1, requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden_units), requires_grad=True)
        self.w2 = Tensor(_he_init(rng, hidden_units, hidden_units) * self.mask2, requires_grad=True)
        self.b2 = Tensor(np.zeros(hidden_units), requires_grad=True)
        # Final layer starts at zero so the emitted spline is whatever the
        # output bias encodes (the identity, for flows).
        self.w3 = Tensor(np.zeros((hidden_units, d_out)), requires_grad=True)
        bias = np.zeros(d_out) if output_bias is None else np.tile(output_bias, self.d_y)
        self.b3 = Tensor(bias.astype(np.float64), requires_grad=True)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def __call__(self, cond, y):
        """cond: array/Tensor (n, d_cond); y: array/Tensor (n, d_y) or None.

        Returns a Tensor (n, d_y, block_size) of raw spline parameters.
        """
        from .autodiff import as_tensor, concat

        cond = as_tensor(cond)
        if self.d_y > 0:
            if y is None:
                y = Tensor(np.zeros((cond.shape[0], self.d_y)))
            inp = concat([cond, as_tensor(y)], axis=-1)
        else:
            inp = cond
        h = (inp @ (self.w1 * self.mask1) + self.b1).relu()
        h = (h @ (self.w2 * self.mask2) + self.b2).relu()
        out = h @ (self.w3 * self.mask3) + self.b3
        return out.reshape(cond.shape[0], self.d_y, self.block_size)


class Mlp:
    """Plain fully connected network with ReLU hidden layers and linear output."""

    def __init__(self, d_in, hidden_layers, d_out, rng):
        sizes = [d_in] + list(hidden_layers) + [d_out]
        self.weights = []
        self.biases = []
        for i in range(len(sizes) - 1):
            self.weights.append(Tensor(_he_init(rng, sizes[i], sizes[i + 1]), requires_grad=True))
            self.biases.append(Tensor(np.zeros(sizes[i + 1]), requires_grad=True))
        self.sizes = sizes

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def __call__(self, inp):
        from .autodiff import as_tensor

        h = as_tensor(inp)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.relu()
        return h


class Adam:
    """Adaptive-moment stochastic gradient method over a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        """Apply one update from accumulated gradients, then clear them."""
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        scale = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(
                sum(float(np.sum(p.grad**2)) for p in self.params if p.grad is not None)
            )
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
