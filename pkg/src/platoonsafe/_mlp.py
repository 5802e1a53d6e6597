"""Minimal fully connected network with manual reverse-mode gradients.

Shared by the behavior predictors and the actor/critic networks.  Keeping
the implementation to plain numpy keeps training deterministic under a
seeded Generator and avoids dragging in an ML framework for what are
two-hidden-layer models.
"""

from __future__ import annotations

import numpy as np


class Mlp:
    """Feed-forward net with tanh hidden activations and linear output."""

    def __init__(self, layer_sizes: list[int], rng: np.random.Generator):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = list(int(s) for s in layer_sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Returns (output, cache) with the cache holding per-layer
        activations for backward()."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [x]
        for li in range(self.n_layers):
            z = acts[-1] @ self.weights[li] + self.biases[li]
            if li < self.n_layers - 1:
                z = np.tanh(z)
            acts.append(z)
        return acts[-1], acts

    def backward(self, cache, dy: np.ndarray):
        """Gradients of sum(dy * output) w.r.t. parameters and input.

        Returns (grads_w, grads_b, dx); dy has the output's shape.
        """
        dy = np.atleast_2d(np.asarray(dy, dtype=float))
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        delta = dy
        for li in range(self.n_layers - 1, -1, -1):
            a_in = cache[li]
            grads_w[li] = a_in.T @ delta
            grads_b[li] = delta.sum(axis=0)
            if li > 0:
                delta = (delta @ self.weights[li].T) * (1.0 - cache[li] ** 2)
        return grads_w, grads_b, delta

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "Mlp":
        dup = Mlp.__new__(Mlp)
        dup.layer_sizes = list(self.layer_sizes)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls.__new__(cls)
        net.layer_sizes = [int(s) for s in d["layer_sizes"]]
        net.weights = [np.asarray(w, dtype=float) for w in d["weights"]]
        net.biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return net


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
