"""Dense ReLU networks with hand-written backprop and an Adamax optimizer.

All parameters of a network live in one flat float64 vector; the per-layer
weight matrices and bias vectors are views into it. That keeps copying,
hashing and optimizer updates to a single array operation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input or gradient does not match the network's layer sizes."""


def relu(x):
    return np.maximum(x, 0.0)


class Mlp:
    """Fully connected network: ReLU on hidden layers, identity output.

    Layer ``k`` computes ``h @ W[k] + b[k]`` with ``W[k]`` of shape
    ``(sizes[k], sizes[k + 1])``. Inputs may be a single vector or a batch
    of row vectors.
    """

    def __init__(self, layer_sizes, rng=None, params=None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"bad layer sizes {layer_sizes!r}")
        self.layer_sizes = sizes
        self._shapes = [(sizes[k], sizes[k + 1]) for k in range(len(sizes) - 1)]
        n = sum(a * b + b for a, b in self._shapes)
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ShapeError(f"expected {n} parameters, got {params.shape}")
            self.params = params.copy()
        else:
            self.params = np.zeros(n)
        self._bind_views()
        if params is None and rng is not None:
            self.init_glorot(rng)

    def _bind_views(self):
        self.weights, self.biases = _split(self.params, self._shapes)

    def init_glorot(self, rng):
        """Uniform in +-sqrt(6 / (fan_in + fan_out)); biases zero."""
        for w, b in zip(self.weights, self.biases):
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
            b[...] = 0.0

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    def copy(self):
        return Mlp(self.layer_sizes, params=self.params)

    def load(self, other):
        """Overwrite parameters in place with those of ``other``."""
        if other.layer_sizes != self.layer_sizes:
            raise ShapeError("layer sizes differ")
        self.params[...] = other.params

    def digest(self):
        return hashlib.sha256(self.params.tobytes()).hexdigest()

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_inputs:
            raise ShapeError(
                f"input of shape {x.shape} does not fit {self.n_inputs} inputs"
            )
        return x

    def forward(self, x):
        h = self._check_input(x)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def forward_cached(self, x):
        """Forward pass that also returns the layer inputs needed by backprop."""
        h = self._check_input(x)
        inputs = []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h, inputs

    def backprop(self, inputs, upstream):
        """Gradient of ``sum(upstream * output)`` w.r.t. the flat parameters.

        ``inputs`` is the cache from :meth:`forward_cached`. Hidden ReLU
        masks are recovered from the cached (post-activation) inputs.
        """
        g = np.asarray(upstream, dtype=np.float64)
        batched = g.ndim == 2
        grads = np.empty_like(self.params)
        gw, gb = _split(grads, self._shapes)
        for k in range(len(self.weights) - 1, -1, -1):
            h = inputs[k]
            if batched:
                gw[k][...] = h.T @ g
                gb[k][...] = g.sum(axis=0)
            else:
                gw[k][...] = np.outer(h, g)
                gb[k][...] = g
            if k > 0:
                g = (g @ self.weights[k].T) * (h > 0.0)
        return grads

    def backward(self, x, upstream_grad):
        out, inputs = self.forward_cached(x)
        upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
        if upstream_grad.shape != out.shape:
            raise ShapeError(
                f"upstream gradient {upstream_grad.shape} vs output {out.shape}"
            )
        return self.backprop(inputs, upstream_grad)

    def unflatten(self, flat):
        """Per-layer (weights, biases) views of a flat gradient vector."""
        return _split(flat, self._shapes)

    def save(self, path):
        np.savez(path, layer_sizes=np.array(self.layer_sizes), params=self.params)

    @classmethod
    def load_file(cls, path):
        with np.load(path) as data:
            return cls(data["layer_sizes"].tolist(), params=data["params"])


def _split(flat, shapes):
    weights, biases = [], []
    i = 0
    for a, b in shapes:
        weights.append(flat[i : i + a * b].reshape(a, b))
        i += a * b
        biases.append(flat[i : i + b])
        i += b
    return weights, biases


@dataclass
class AdamaxState:
    first_moment: np.ndarray
    inf_norm: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adamax_step(params, grads, state, lr):
    """One in-place Adamax update of ``params``; returns ``params``."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError("params, grads and optimizer state must share a shape")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step_count += 1
    m, u = state.first_moment, state.inf_norm
    m *= state.beta1
    m += (1.0 - state.beta1) * grads
    np.maximum(state.beta2 * u, np.abs(grads), out=u)
    step = lr / (1.0 - state.beta1**state.step_count)
    params -= step * m / (u + state.eps)
    return params


@dataclass
class Adamax:
    """Optimizer bound to one network's flat parameter vector."""

    net: Mlp
    lr: float = 0.005
    state: AdamaxState = field(init=False)

    def __post_init__(self):
        self.state = AdamaxState.zeros(self.net.params.size)

    def step(self, grads):
        adamax_step(self.net.params, grads, self.state, self.lr)
        if not np.all(np.isfinite(self.net.params)):
            raise FloatingPointError("non-finite parameters after update")
