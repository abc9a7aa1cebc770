"""Small MLP feature encoder with hand-written backprop, a finite-difference
gradient checker, and SGD with momentum."""

from dataclasses import dataclass, field

import numpy as np

from .numeric import InvalidInput

ACTIVATIONS = ("relu", "tanh")


class Encoder:
    """Fully connected network mapping raw inputs to d-dimensional features.

    ``layer_sizes`` lists the widths from input to output. Hidden layers use
    ``activation``; the output layer is linear. A single entry (``[d]``) is the
    identity encoder used for precomputed features.
    """

    def __init__(self, layer_sizes, activation="relu", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(layer_sizes) < 1 or any(int(s) < 1 for s in layer_sizes):
            raise ValueError(f"bad layer sizes {layer_sizes}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    @property
    def is_identity(self):
        return len(self.weights) == 0

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, arrays):
        arrays = list(arrays)
        if len(arrays) != 2 * len(self.weights):
            raise InvalidInput("parameter count mismatch")
        for i in range(len(self.weights)):
            w, b = arrays[2 * i], arrays[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise InvalidInput(f"shape mismatch in layer {i}")
            self.weights[i] = np.array(w, dtype=float)
            self.biases[i] = np.array(b, dtype=float)

    def _act(self, h):
        if self.activation == "relu":
            return np.maximum(h, 0.0)
        return np.tanh(h)

    def _act_grad(self, h, a):
        if self.activation == "relu":
            return (h > 0).astype(float)
        return 1.0 - a * a

    def forward(self, x):
        """Return ``(features, cache)`` for a batch (or single vector) ``x``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise InvalidInput(f"input dimension {x.shape[-1]} != {self.in_dim}")
        cache = [x]
        a = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ w + b
            if i < n - 1:
                a = self._act(h)
                cache.append((h, a))
            else:
                a = h
        return a, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Gradients of ``sum(output * grad_out)``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
        :meth:`params`.
        """
        grad_out = np.asarray(grad_out, dtype=float)
        x = cache[0]
        expected = x.shape[:-1] + (self.out_dim,)
        if grad_out.shape != expected:
            raise InvalidInput(f"output gradient shape {grad_out.shape} != {expected}")
        n = len(self.weights)
        grads = [None] * (2 * n)
        g = grad_out
        for i in range(n - 1, -1, -1):
            a_in = cache[0] if i == 0 else cache[i][1]
            a2 = np.atleast_2d(a_in)
            g2 = np.atleast_2d(g)
            grads[2 * i] = a2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                h, a = cache[i]
                g = g * self._act_grad(h, a)
        return grads, g


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple = None
    passed: bool = True
    details: list = field(default_factory=list)


def grad_check(loss_fn, params, tolerance=1e-4, n_coords=20, step=1e-5, seed=0, floor=1e-7):
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` matching
    ``params`` (a list of arrays, perturbed in place and restored). Relative
    error is ``|a - n| / max(|a|, |n|, floor)``. Failures are reported, never
    raised.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(params)
    grads = [np.array(g, dtype=float) for g in grads]
    sizes = np.array([p.size for p in params])
    coords = []
    total = sizes.sum()
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((k, int(flat - offsets[k])))

    worst = 0.0
    worst_at = None
    details = []
    for k, j in coords:
        p = params[k].reshape(-1)
        old = p[j]
        p[j] = old + step
        lp, _ = loss_fn(params)
        p[j] = old - step
        lm, _ = loss_fn(params)
        p[j] = old
        num = (lp - lm) / (2 * step)
        ana = grads[k].reshape(-1)[j]
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        details.append((k, j, ana, num, rel))
        if rel > worst:
            worst, worst_at = rel, (k, j)
    return GradCheckReport(worst, len(coords), worst_at, worst < tolerance, details)


class SGDMomentum:
    """v <- momentum * v + g;  theta <- theta - lr * v  (in place)."""

    def __init__(self, params, learning_rate=1e-2, momentum=0.9):
        if not learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p, dtype=float) for p in params]

    def step(self, params, grads):
        if len(params) != len(self.velocity) or len(grads) != len(params):
            raise InvalidInput("parameter/gradient count mismatch")
        for p, g, v in zip(params, grads, self.velocity):
            if g is None:
                continue
            if p.shape != v.shape or np.shape(g) != p.shape:
                raise InvalidInput(f"shape mismatch {p.shape} / {np.shape(g)}")
            v *= self.momentum
            v += g
            p -= self.learning_rate * v
        return params
