"""Small velocity network with hand-written reverse mode.

The network maps (x_t, condition, t) to a velocity. Inputs are featurized as
[x_t, one_hot(condition), t, 1 - t, sin 2 pi t, cos 2 pi t]. Parameters are a
flat list [W0, b0, W1, b1, ...] with W of shape (fan_in, fan_out).
"""

from __future__ import annotations

import numpy as np

from .errors import CorruptedModelError

N_TIME_FEATURES = 4

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a**2),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, a: 0.5 * (1.0 + np.tanh(0.5 * z))),
}


def time_features(t):
    t = np.asarray(t, dtype=np.float64)
    return np.stack([t, 1.0 - t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)], axis=-1)


class MLP:
    """Fully connected velocity model v(x_t, c, t)."""

    def __init__(self, dim, n_cond=1, hidden=(64, 64, 64), activation="tanh", seed=0, zero_final=True):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 1 <= n_cond <= 16:
            raise ValueError("condition vocabulary must have between 1 and 16 entries")
        self.dim = int(dim)
        self.n_cond = int(n_cond)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        rng = np.random.default_rng(seed)
        widths = [self.n_features, *self.hidden, self.dim]
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_final:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
            self.params += [W, np.zeros(fan_out)]
        self._cache = None

    @property
    def n_features(self):
        return self.dim + self.n_cond + N_TIME_FEATURES

    @property
    def n_layers(self):
        return len(self.params) // 2

    def architecture(self):
        return {
            "dim": self.dim,
            "n_cond": self.n_cond,
            "hidden": list(self.hidden),
            "activation": self.activation,
        }

    @classmethod
    def from_architecture(cls, arch, params=None):
        model = cls(arch["dim"], arch["n_cond"], tuple(arch["hidden"]), arch["activation"])
        if params is not None:
            model.set_flat(params)
        return model

    def copy(self):
        other = MLP.__new__(MLP)
        other.__dict__.update(self.__dict__)
        other.params = [p.copy() for p in self.params]
        other._cache = None
        return other

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        sizes = [p.size for p in self.params]
        if flat.size != sum(sizes):
            raise ValueError(f"expected {sum(sizes)} parameters, got {flat.size}")
        chunks = np.split(flat, np.cumsum(sizes)[:-1])
        self.params = [c.reshape(p.shape).copy() for c, p in zip(chunks, self.params)]

    def featurize(self, x, cond, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        if x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {x.shape[1]}")
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
        if np.any(cond < 0) or np.any(cond >= self.n_cond):
            raise ValueError(f"condition id outside vocabulary of size {self.n_cond}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        onehot = np.zeros((n, self.n_cond))
        onehot[np.arange(n), cond] = 1.0
        return np.concatenate([x, onehot, time_features(t)], axis=1)

    def forward(self, x, cond, t):
        """Velocity for a batch; caches activations for :meth:`backward`."""
        for p in self.params:
            if not np.all(np.isfinite(p)):
                raise CorruptedModelError("model weights contain NaN or Inf")
        act, dact = ACTIVATIONS[self.activation]
        h = self.featurize(x, cond, t)
        inputs, pre, post = [], [], []
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(h)
            z = h @ W + b
            if i < self.n_layers - 1:
                h = act(z)
                pre.append(z)
                post.append(h)
            else:
                h = z
        self._cache = (inputs, pre, post)
        return h

    __call__ = forward

    def backward(self, grad_out):
        """Gradients of sum(grad_out * v) with respect to every parameter."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        _, dact = ACTIVATIONS[self.activation]
        inputs, pre, post = self._cache
        grads = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            W = self.params[2 * i]
            grads[2 * i] = inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ W.T) * dact(pre[i - 1], post[i - 1])
        return grads

    def field(self, cond):
        """Velocity callable ``v(x, t)`` for a fixed condition, as samplers expect."""
        return lambda x, t: self.forward(x, cond, t)


class Adam:
    """Adaptive-moment optimizer acting in place on a parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr != 0.0:
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(theta_old, theta, eta):
    """theta_old <- eta * theta_old + (1 - eta) * theta, per parameter array."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if len(theta_old) != len(theta) or any(a.shape != b.shape for a, b in zip(theta_old, theta)):
        raise ValueError("parameter shapes differ")
    if eta == 0.0:
        return [p.copy() for p in theta]
    # written as a correction so that theta_old == theta is an exact fixed point
    return [o + (1.0 - eta) * (n - o) for o, n in zip(theta_old, theta)]
