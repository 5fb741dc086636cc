"""Fully connected networks stored as one flat parameter vector.

Every learned piece of the package (decoder head, MLP field, reconstruction
backbone, denoiser) is a small dense net, and the optimizers work on flat
vectors, so the layout lives here once.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("relu", "tanh", "softplus")


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, x, y):
    # derivative expressed with the pre-activation x and output y
    if name == "relu":
        return (x > 0.0).astype(x.dtype)
    if name == "tanh":
        return 1.0 - y * y
    return sigmoid(x)


def sigmoid(x):
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def softplus(x):
    # stable log(1 + e^x); equals 0 at -inf
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


class MLP:
    """Layer sizes ``sizes[0] -> ... -> sizes[-1]``, linear output layer.

    Parameters are packed layer by layer as ``W (in, out)`` followed by
    ``b (out,)``.
    """

    def __init__(self, sizes, activation="relu"):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b))
        self.n_params = offset

    def __repr__(self):
        return f"MLP({list(self.sizes)}, {self.activation!r})"

    def layers(self, flat):
        """Views ``[(W, b), ...]`` into ``flat``."""
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        out = []
        for (ws, bs), fan_in, fan_out in zip(self._slices, self.sizes[:-1], self.sizes[1:]):
            out.append((flat[ws].reshape(fan_in, fan_out), flat[bs]))
        return out

    def init(self, rng, scale=None, zero_last=False):
        """Uniform fan-in initialisation; ``scale`` overrides the bound."""
        flat = np.zeros(self.n_params)
        for (ws, bs), fan_in in zip(self._slices, self.sizes[:-1]):
            bound = scale if scale is not None else 1.0 / np.sqrt(fan_in)
            flat[ws] = rng.uniform(-bound, bound, ws.stop - ws.start)
            flat[bs] = rng.uniform(-bound, bound, bs.stop - bs.start)
        if zero_last:
            ws, bs = self._slices[-1]
            flat[ws.start:bs.stop] = 0.0
        return flat

    def forward(self, flat, x):
        """Returns ``(y, cache)``; ``cache`` feeds :meth:`backward`."""
        layers = self.layers(flat)
        acts = [x]
        pre = []
        h = x
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            if i < len(layers) - 1:
                pre.append(z)
                h = _act(self.activation, z)
            else:
                h = z
            acts.append(h)
        return h, (acts, pre)

    def __call__(self, flat, x):
        return self.forward(flat, x)[0]

    def backward(self, flat, cache, grad_out, need_input=True):
        """Reverse pass: returns ``(grad_flat, grad_input or None)``."""
        layers = self.layers(flat)
        acts, pre = cache
        grad = np.zeros(self.n_params)
        g = grad_out
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            ws, bs = self._slices[i]
            h_in = acts[i]
            grad[ws] = (h_in.T @ g).ravel()
            grad[bs] = g.sum(axis=0)
            if i == 0 and not need_input:
                return grad, None
            g = g @ w.T
            if i > 0:
                g = g * _act_grad(self.activation, pre[i - 1], acts[i])
        return grad, g
