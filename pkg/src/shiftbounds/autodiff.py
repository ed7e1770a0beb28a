"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine is deliberately small: it supports exactly the operations the
spline flows and their trainers need, always in float64. A :class:`Tensor`
wraps an ``ndarray`` and records its parents plus a backward closure; calling
:meth:`Tensor.backward` on a scalar runs one reverse sweep over the recorded
graph and accumulates ``.grad`` on every leaf created with
``requires_grad=True``. Graphs are single-use: a second backward through the
same tensor raises.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "concat",
    "where",
    "numeric_gradient",
    "check_gradient",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (pure evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    # keep numpy from absorbing us into object arrays; binary ops with
    # ndarrays then fall back to the __r*__ methods below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self._done = False

    # ---- construction helpers -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- graph machinery ------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if self._done:
            raise RuntimeError("backward() already ran through this graph (single-use tape)")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._done = True
            if node._backward is None:
                if node.requires_grad and not node._parents:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ---- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        if not (_GRAD_ENABLED and (self.requires_grad or other.requires_grad)):
            return Tensor(out_data)
        return Tensor(
            out_data,
            parents=(self, other),
            backward=lambda g: (
                _unbroadcast(g, self.data.shape),
                _unbroadcast(g, other.data.shape),
            ),
        )

    __radd__ = __add__

    def __neg__(self):
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(-self.data)
        return Tensor(-self.data, parents=(self,), backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data
        if not (_GRAD_ENABLED and (self.requires_grad or other.requires_grad)):
            return Tensor(out_data)
        return Tensor(
            out_data,
            parents=(self, other),
            backward=lambda g: (
                _unbroadcast(g * other.data, self.data.shape),
                _unbroadcast(g * self.data, other.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data
        if not (_GRAD_ENABLED and (self.requires_grad or other.requires_grad)):
            return Tensor(out_data)
        return Tensor(
            out_data,
            parents=(self, other),
            backward=lambda g: (
                _unbroadcast(g / other.data, self.data.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, expo):
        expo = float(expo)
        out_data = self.data**expo
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        return Tensor(
            out_data,
            parents=(self,),
            backward=lambda g: (g * expo * self.data ** (expo - 1.0),),
        )

    # ---- elementwise functions -------------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * out_data,))

    def log(self):
        out_data = np.log(self.data)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g / self.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * 0.5 / out_data,))

    def abs(self):
        out_data = np.abs(self.data)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        sign = np.sign(self.data)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * sign,))

    def relu(self):
        out_data = np.maximum(self.data, 0.0)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        mask = (self.data > 0.0).astype(np.float64)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * mask,))

    def softplus(self):
        # log(1 + exp(x)) computed without overflow
        out_data = np.logaddexp(0.0, self.data)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        sig = _sigmoid(self.data)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * sig,))

    def sigmoid(self):
        out_data = _sigmoid(self.data)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        return Tensor(
            out_data,
            parents=(self,),
            backward=lambda g: (g * out_data * (1.0 - out_data),),
        )

    def clip(self, lo, hi):
        """Clamp values; gradient passes only through unclipped entries."""
        out_data = np.clip(self.data, lo, hi)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        mask = ((self.data >= lo) & (self.data <= hi)).astype(np.float64)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * mask,))

    def maximum_const(self, c):
        """Elementwise max with a constant floor; gradient is zero where floored."""
        out_data = np.maximum(self.data, c)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        mask = (self.data > c).astype(np.float64)
        return Tensor(out_data, parents=(self,), backward=lambda g: (g * mask,))

    # ---- reductions -------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.data.shape).copy(),)

        return Tensor(out_data, parents=(self,), backward=backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def max(self, axis=None, keepdims=False):
        """Hard maximum; the gradient routes through the (first) argmax only."""
        out_data = self.data.max(axis=axis, keepdims=keepdims)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)

        if axis is None:
            hot = np.zeros_like(self.data)
            hot[np.unravel_index(np.argmax(self.data), self.data.shape)] = 1.0
            backward = lambda g: (g * hot,)
        else:
            idx = np.argmax(self.data, axis=axis)
            hot = np.zeros_like(self.data)
            np.put_along_axis(hot, np.expand_dims(idx, axis), 1.0, axis=axis)

            def backward(g):
                gg = g if keepdims else np.expand_dims(g, axis)
                return (hot * gg,)

        return Tensor(out_data, parents=(self,), backward=backward)

    # ---- shape ops ----------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        return Tensor(
            out_data, parents=(self,), backward=lambda g: (g.reshape(self.data.shape),)
        )

    def __getitem__(self, key):
        out_data = self.data[key]
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)

        basic = isinstance(key, (slice, int)) or (
            isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key)
        )

        def backward(g):
            full = np.zeros_like(self.data)
            if basic:  # basic indexing never aliases, so assignment suffices
                full[key] = g
            else:
                np.add.at(full, key, g)
            return (full,)

        return Tensor(out_data, parents=(self,), backward=backward)

    def repeat_rows(self, reps):
        """Repeat each leading row `reps` times: (n, ...) -> (n*reps, ...)."""
        out_data = np.repeat(self.data, reps, axis=0)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)
        n = self.data.shape[0]
        rest = self.data.shape[1:]

        def backward(g):
            return (g.reshape((n, reps) + rest).sum(axis=1),)

        return Tensor(out_data, parents=(self,), backward=backward)

    # ---- linear algebra -------------------------------------------------------------
    def matmul(self, other):
        other = as_tensor(other)
        out_data = self.data @ other.data
        if not (_GRAD_ENABLED and (self.requires_grad or other.requires_grad)):
            return Tensor(out_data)
        return Tensor(
            out_data,
            parents=(self, other),
            backward=lambda g: (g @ other.data.T, self.data.T @ g),
        )

    __matmul__ = matmul

    def gather_last(self, index):
        """Take entries along the last axis: out[..., j] = self[..., index[..., j]]."""
        index = np.asarray(index)
        out_data = np.take_along_axis(self.data, index, axis=-1)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)

        if self.data.ndim == 2:
            n, m = self.data.shape
            rows = np.arange(n)[:, None] * m

            def backward(g):
                flat = np.bincount(
                    (rows + index).ravel(), weights=g.ravel(), minlength=n * m
                )
                return (flat.reshape(n, m),)

        else:

            def backward(g):
                full = np.zeros_like(self.data)
                np.add.at(
                    full,
                    tuple(np.indices(index.shape)[:-1]) + (index,),
                    g,
                )
                return (full,)

        return Tensor(out_data, parents=(self,), backward=backward)

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)

        def backward(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return ((g - dot) * out_data,)

        return Tensor(out_data, parents=(self,), backward=backward)

    def cumsum_last(self):
        out_data = np.cumsum(self.data, axis=-1)
        if not (_GRAD_ENABLED and self.requires_grad):
            return Tensor(out_data)

        def backward(g):
            return (np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1),)

        return Tensor(out_data, parents=(self,), backward=backward)

    def item(self):
        return float(self.data)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not (_GRAD_ENABLED and any(t.requires_grad for t in tensors)):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


def where(cond, a, b):
    """Elementwise select; `cond` is a plain boolean array (never differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    a = as_tensor(a)
    b = as_tensor(b)
    out_data = np.where(cond, a.data, b.data)
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return Tensor(out_data)
    return Tensor(
        out_data,
        parents=(a, b),
        backward=lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        ),
    )


def numeric_gradient(fn, values, eps=1e-6):
    """Central-difference gradients of a scalar function of numpy arrays.

    `fn` maps a list of arrays to a float; returns one gradient array per input.
    """
    grads = []
    for k, v in enumerate(values):
        v = np.asarray(v, dtype=np.float64)
        g = np.zeros_like(v)
        flat = v.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            h = eps * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + h
            up = fn(values)
            flat[i] = orig - h
            down = fn(values)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradient(fn, values, eps=1e-6, rtol=1e-4, atol=1e-8):
    """Compare analytic and finite-difference gradients; return worst relative error.

    `fn` maps a list of Tensors to a scalar Tensor. `values` are numpy arrays
    treated as the differentiable leaves.
    """
    leaves = [Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in values]
    out = fn(leaves)
    out.backward()
    analytic = [
        np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad for leaf in leaves
    ]

    def eval_fn(arrs):
        with no_grad():
            return float(fn([Tensor(a) for a in arrs]).data)

    numeric = numeric_gradient(eval_fn, [np.array(v, dtype=np.float64) for v in values], eps)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.abs(gn), atol / rtol)
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)) if ga.size else 0.0)
    return worst
