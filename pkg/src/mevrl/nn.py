"""Small numpy neural-network engine: rectifier MLPs, K-headed ensembles, Adam.

Gradients are hand-written reverse mode and checked against finite
differences in the test suite.  Parameters are float64 throughout.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MEVRL1"


class ShapeError(ValueError):
    pass


def _uniform_init(fan_in, shape, rng):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Mlp:
    """Fully connected net; rectifier after every layer except (optionally) the last."""

    def __init__(self, sizes, rng=None, activate_last: bool = False, zero: bool = False):
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.activate_last = activate_last
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero:
                self.weights.append(np.zeros((fan_in, fan_out)))
                self.biases.append(np.zeros(fan_out))
            else:
                self.weights.append(_uniform_init(fan_in, (fan_in, fan_out), rng))
                self.biases.append(_uniform_init(fan_in, (fan_out,), rng))

    @property
    def param_count(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x):
        """Returns ``(output, cache)``; the cache holds each layer's input and pre-activation."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeError(f"expected input of width {self.sizes[0]}, got {x.shape}")
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = x @ w + b
            cache.append((x, z))
            x = np.maximum(z, 0.0) if (i < last or self.activate_last) else z
        return x, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, input_grad: bool = True):
        """Parameter gradients (ordered like :meth:`params`) and the input gradient.

        With ``input_grad=False`` the input gradient is skipped and ``None`` returned.
        """
        if len(cache) != len(self.weights):
            raise ShapeError("cache does not belong to this network")
        grad = np.asarray(grad_out, dtype=float)
        if grad.shape != cache[-1][1].shape:
            raise ShapeError("output gradient shape mismatch")
        grads = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            x, z = cache[i]
            if i < last or self.activate_last:
                grad = grad * (z > 0)
            grads[2 * i] = x.T @ grad
            grads[2 * i + 1] = grad.sum(axis=0)
            if i > 0 or input_grad:
                grad = grad @ self.weights[i].T
            else:
                grad = None
        return grads, grad


class EnsembleNet:
    """Shared rectifier trunk feeding ``K`` linear heads, each scoring every action."""

    def __init__(self, n_inputs: int, n_actions: int, heads: int = 10, hidden=(64,), rng=None):
        if heads < 1:
            raise ShapeError("need at least one head")
        rng = np.random.default_rng(rng)
        self.trunk = Mlp((n_inputs, *hidden), rng, activate_last=True)
        width = self.trunk.sizes[-1]
        self.heads = heads
        self.n_actions = n_actions
        self.head_w = _uniform_init(width, (heads, width, n_actions), rng)
        self.head_b = _uniform_init(width, (heads, n_actions), rng)
        self._bind(np.concatenate([p.ravel() for p in self.params()]))

    def _bind(self, theta):
        """Make every parameter array a view into the flat vector ``theta``."""
        self.theta = theta
        shapes = [p.shape for p in self.params()]
        views = []
        pos = 0
        for shape in shapes:
            size = int(np.prod(shape))
            views.append(theta[pos:pos + size].reshape(shape))
            pos += size
        n = len(self.trunk.weights)
        self.trunk.weights = views[0:2 * n:2]
        self.trunk.biases = views[1:2 * n:2]
        self.head_w, self.head_b = views[-2], views[-1]

    def head_mask(self, heads) -> np.ndarray:
        """Boolean mask over ``theta`` selecting the parameters of the given heads."""
        out = np.zeros(self.theta.size, dtype=bool)
        pick = np.zeros(self.heads, dtype=bool)
        pick[np.asarray(heads, dtype=int)] = True
        n_w = self.head_w.size
        start = self.theta.size - n_w - self.head_b.size
        out[start:start + n_w] = np.repeat(pick, n_w // self.heads)
        out[start + n_w:] = np.repeat(pick, self.n_actions)
        return out

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return self.trunk.sizes

    def params(self) -> list[np.ndarray]:
        return self.trunk.params() + [self.head_w, self.head_b]

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x):
        """Returns ``(q, cache)`` with ``q`` of shape ``(batch, K, actions)``."""
        h, cache = self.trunk.forward(x)
        q = np.matmul(h, self.head_w).transpose(1, 0, 2) + self.head_b[None]
        return q, (h, cache)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_q, trunk_scale: float = 1.0):
        h, trunk_cache = cache
        grad_q = np.asarray(grad_q, dtype=float)
        g_kba = grad_q.transpose(1, 0, 2)
        g_w = np.matmul(h.T, g_kba)
        g_b = grad_q.sum(axis=0)
        g_h = np.matmul(g_kba, self.head_w.transpose(0, 2, 1)).sum(axis=0) * trunk_scale
        g_trunk, _ = self.trunk.backward(trunk_cache, g_h, input_grad=False)
        return g_trunk + [g_w, g_b]

    def copy(self) -> "EnsembleNet":
        other = object.__new__(EnsembleNet)
        other.heads = self.heads
        other.n_actions = self.n_actions
        other.trunk = object.__new__(Mlp)
        other.trunk.sizes = self.trunk.sizes
        other.trunk.activate_last = self.trunk.activate_last
        other.trunk.weights = list(self.trunk.weights)
        other.trunk.biases = list(self.trunk.biases)
        other.head_w, other.head_b = self.head_w, self.head_b
        other._bind(self.theta.copy())
        return other

    def load_from(self, other: "EnsembleNet"):
        self.theta[...] = other.theta

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def flat_grad(self, grads) -> np.ndarray:
        return np.concatenate([g.ravel() for g in grads])

    def set_flat(self, values):
        values = np.asarray(values, dtype=float)
        if values.size != self.param_count:
            raise ShapeError("flat parameter vector has the wrong length")
        self.theta[...] = values

    def save(self, path):
        sizes = self.trunk.sizes
        header = MAGIC + struct.pack("<I", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
        header += struct.pack("<II", self.heads, self.n_actions)
        Path(path).write_bytes(header + self.flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EnsembleNet":
        data = Path(path).read_bytes()
        if data[:6] != MAGIC:
            raise ShapeError("not a checkpoint file (bad magic)")
        pos = 6
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        sizes = struct.unpack_from(f"<{n}I", data, pos)
        pos += 4 * n
        heads, actions = struct.unpack_from("<II", data, pos)
        pos += 8
        net = cls(sizes[0], actions, heads, sizes[1:], rng=0)
        net.set_flat(np.frombuffer(data, dtype="<f8", offset=pos))
        return net


class Adam:
    """Bias-corrected Adam; keeps one moment pair per parameter array."""

    def __init__(self, params, rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.rate = rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self._work = [np.empty_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, frozen=None):
        """One update; ``frozen`` (boolean arrays like ``params``) marks entries to leave alone.

        Frozen entries keep their value and their moment estimates.
        """
        if len(params) != len(self.m):
            raise ShapeError("parameter list does not match optimiser state")
        saved = None
        if frozen is not None:
            saved = [(f, p[f], m[f], v[f]) for f, p, m, v in zip(frozen, params, self.m, self.v)]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v, w in zip(params, grads, self.m, self.v, self._work):
            # in place: m, v moments; w = rate * m_hat / (sqrt(v_hat) + eps)
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=w)
            m += w
            v *= self.beta2
            np.multiply(g, g, out=w)
            w *= 1.0 - self.beta2
            v += w
            np.sqrt(v, out=w)
            w *= 1.0 / np.sqrt(c2)
            w += self.eps
            np.divide(m, w, out=w)
            w *= self.rate / c1
            p -= w
        if saved is not None:
            for (f, pf, mf, vf), p, m, v in zip(saved, params, self.m, self.v):
                p[f], m[f], v[f] = pf, mf, vf


def adam_step(params, grads, state: Adam):
    state.step(params, grads)
    return params, state


__all__ = ["Mlp", "EnsembleNet", "Adam", "adam_step", "ShapeError", "MAGIC"]
