"""Dense networks with hand-written reverse mode.

Everything works on row batches: an input of shape (N, d) produces (N, d_out);
a 1-D input is treated as a batch of one and squeezed back.  Parameter
gradients are returned as lists aligned with ``parameters()`` and are summed
over the batch.

Besides the plain forward/backward pair, ``Mlp`` supports a forward-mode
tangent pass (``jvp``) and its reverse (``jvp_backward``).  Barrier rates
grad B(x) . v are directional derivatives, and training them needs gradients of
a first derivative, which is what the second pair provides.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1


def _relu(z):
    return np.maximum(z, 0.0)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return _relu(z)
    raise ValueError(f"unknown activation {name!r}")


def _d1(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(z.dtype)


def _d2(name, z, a):
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(z)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


@dataclass
class Mlp:
    weights: list  # (d_out, d_in) per layer
    biases: list
    activations: list  # one tag per hidden layer; the output layer is linear

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.activations) != len(self.weights) - 1:
            raise ValueError("inconsistent layer lists")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise ValueError("layer shapes do not chain")

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator, activation="tanh", out_scale=1.0) -> "Mlp":
        ws, bs = [], []
        for i, (d_in, d_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            w = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
            if i == len(layer_dims) - 2:
                w *= out_scale
            ws.append(w)
            bs.append(np.zeros(d_out))
        acts = [activation] * (len(layer_dims) - 2) if isinstance(activation, str) else list(activation)
        return cls(ws, bs, acts)

    @classmethod
    def zeros(cls, layer_dims, activation="tanh") -> "Mlp":
        ws = [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
        bs = [np.zeros(o) for o in layer_dims[1:]]
        return cls(ws, bs, [activation] * (len(layer_dims) - 2))

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def _check(self, x):
        if x.shape[-1] != self.weights[0].shape[1]:
            raise ValueError(f"expected input dim {self.weights[0].shape[1]}, got {x.shape[-1]}")

    def forward(self, x):
        y, _ = self.forward_cache(x)
        return y

    def forward_cache(self, x):
        x, single = _as_batch(x)
        self._check(x)
        a = x
        zs, acts = [], [x]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            if i < n - 1:
                a = _act(self.activations[i], z)
                zs.append(z)
                acts.append(a)
            else:
                a = z
        return (a[0] if single else a), (zs, acts, single)

    def backward(self, cache, upstream):
        """Gradients of sum(upstream * y) w.r.t. parameters and input."""
        zs, acts, single = cache
        g = np.asarray(upstream, dtype=float)
        if single:
            g = g[None, :]
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = g.T @ acts[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * _d1(self.activations[i - 1], zs[i - 1], acts[i])
        return grads, (g[0] if single else g)

    def jvp(self, x, v):
        """Forward pass together with the tangent J(x) v."""
        x, single = _as_batch(x)
        v, _ = _as_batch(v)
        self._check(x)
        a, da = x, v
        zs, acts, dzs, dacts = [], [x], [], [v]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            dz = da @ w.T
            if i < n - 1:
                name = self.activations[i]
                a = _act(name, z)
                da = _d1(name, z, a) * dz
                zs.append(z)
                dzs.append(dz)
                acts.append(a)
                dacts.append(da)
            else:
                a, da = z, dz
        cache = (zs, acts, dzs, dacts, single)
        if single:
            return a[0], da[0], cache
        return a, da, cache

    def jvp_backward(self, cache, gy, gdy):
        """Reverse pass through ``jvp``: gradients w.r.t. parameters, x and v."""
        zs, acts, dzs, dacts, single = cache
        gz = np.asarray(gy, dtype=float)
        gdz = np.asarray(gdy, dtype=float)
        if single:
            gz, gdz = gz[None, :], gdz[None, :]
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            w = self.weights[i]
            grads[2 * i] = gz.T @ acts[i] + gdz.T @ dacts[i]
            grads[2 * i + 1] = gz.sum(axis=0)
            ga = gz @ w
            gda = gdz @ w
            if i > 0:
                name = self.activations[i - 1]
                z, a, dz = zs[i - 1], acts[i], dzs[i - 1]
                d1 = _d1(name, z, a)
                gdz = d1 * gda
                gz = d1 * ga + _d2(name, z, a) * dz * gda
            else:
                gz, gdz = ga, gda
        if single:
            return grads, gz[0], gdz[0]
        return grads, gz, gdz

    def input_gradient(self, x):
        """Gradient of a scalar-output network w.r.t. its input, batched."""
        y, cache = self.forward_cache(x)
        _, gx = self.backward(cache, np.ones_like(y))
        return y, gx

    def to_dict(self) -> dict:
        return {
            "layer_dims": self.layer_dims,
            "activations": list(self.activations),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        dims = d["layer_dims"]
        ws = [np.array(w, dtype=float).reshape(o, i) for w, i, o in zip(d["weights"], dims[:-1], dims[1:])]
        bs = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(ws, bs, list(d["activations"]))


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sin/cos table; every row has norm sqrt(dim / 2)."""
    if dim % 2:
        raise ValueError("positional dimension must be even")
    k = np.arange(dim // 2)
    freq = 1.0 / 10000.0 ** (2 * k / dim)
    ang = np.arange(n_positions)[:, None] * freq[None, :]
    table = np.empty((n_positions, dim))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table


@dataclass
class PosEncoding:
    dim: int
    table: np.ndarray

    @classmethod
    def sinusoidal(cls, n_views: int, dim: int = 8) -> "PosEncoding":
        return cls(dim, sinusoidal_table(n_views, dim))


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AttentionAggregator:
    """Softmax attention over views: h* = sum_i score_i * [h_i || pos_i]."""

    score_net: Mlp
    pos: PosEncoding
    temperature: float = 1.0

    @classmethod
    def init(cls, embed_dim: int, n_views: int, rng, pos_dim: int = 8, hidden: int = 16, temperature=1.0):
        net = Mlp.init([embed_dim + pos_dim, hidden, 1], rng, "tanh", out_scale=0.5)
        return cls(net, PosEncoding.sinusoidal(n_views, pos_dim), temperature)

    @property
    def out_dim(self) -> int:
        return self.score_net.layer_dims[0]

    def parameters(self):
        return self.score_net.parameters()

    def forward(self, emb):
        """emb: (N, M, D) or (M, D).  Returns (h_star, scores, cache)."""
        emb = np.asarray(emb, dtype=float)
        single = emb.ndim == 2
        if single:
            emb = emb[None]
        n, m, _ = emb.shape
        if m != self.pos.table.shape[0]:
            raise ValueError(f"got {m} views, positional table has {self.pos.table.shape[0]}")
        hp = np.concatenate([emb, np.broadcast_to(self.pos.table, (n, m, self.pos.dim))], axis=-1)
        s, scache = self.score_net.forward_cache(hp.reshape(n * m, -1))
        alpha = softmax(s.reshape(n, m) / self.temperature)
        h_star = np.einsum("nm,nmk->nk", alpha, hp)
        cache = (hp, alpha, scache)
        if single:
            return h_star[0], alpha[0], cache
        return h_star, alpha, cache

    def backward(self, cache, g_hstar):
        hp, alpha, scache = cache
        g_hstar = np.atleast_2d(g_hstar)
        g_alpha = np.einsum("nk,nmk->nm", g_hstar, hp)
        g_s = alpha * (g_alpha - (alpha * g_alpha).sum(axis=1, keepdims=True)) / self.temperature
        grads, _ = self.score_net.backward(scache, g_s.reshape(-1, 1))
        return grads

    def to_dict(self):
        return {"score_net": self.score_net.to_dict(), "pos_dim": self.pos.dim,
                "n_views": int(self.pos.table.shape[0]), "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d):
        return cls(Mlp.from_dict(d["score_net"]), PosEncoding.sinusoidal(d["n_views"], d["pos_dim"]),
                   float(d["temperature"]))


@dataclass
class StateEncoder:
    """Recurrent latent state x_t = core(h*_t, x_{t-1}, u_{t-1}) with x_{-1} = 0, u_{-1} = 0."""

    aggregator: AttentionAggregator
    core: Mlp
    state_dim: int
    control_dim: int = 2

    @classmethod
    def init(cls, embed_dim: int, n_views: int, rng, state_dim: int = 16, hidden: int = 64,
             pos_dim: int = 8, control_dim: int = 2):
        agg = AttentionAggregator.init(embed_dim, n_views, rng, pos_dim=pos_dim)
        core = Mlp.init([agg.out_dim + state_dim + control_dim, hidden, state_dim], rng, "tanh")
        return cls(agg, core, state_dim, control_dim)

    @property
    def initial_state(self):
        return np.zeros(self.state_dim)

    def parameters(self):
        return self.aggregator.parameters() + self.core.parameters()

    def step(self, emb_t, x_prev, u_prev):
        """One recurrent step; emb_t is (M, D) or (B, M, D)."""
        h_star, _, _ = self.aggregator.forward(emb_t)
        c = np.concatenate([np.atleast_2d(h_star), np.atleast_2d(x_prev), np.atleast_2d(u_prev)], axis=-1)
        x = self.core.forward(c)
        return x[0] if np.ndim(emb_t) == 2 else x

    def forward(self, emb, controls):
        """emb: (B, T, M, D); controls: (B, T, 2) logged controls.  Returns states (B, T, S)."""
        emb = np.asarray(emb, dtype=float)
        controls = np.asarray(controls, dtype=float)
        b, t_len, m, d = emb.shape
        if controls.shape != (b, t_len, self.control_dim):
            raise ValueError("controls must be (B, T, control_dim)")
        h_star, _, acache = self.aggregator.forward(emb.reshape(b * t_len, m, d))
        h_star = h_star.reshape(b, t_len, -1)
        xs = np.empty((b, t_len, self.state_dim))
        x_prev = np.zeros((b, self.state_dim))
        u_prev = np.zeros((b, self.control_dim))
        ccaches = []
        for t in range(t_len):
            c = np.concatenate([h_star[:, t], x_prev, u_prev], axis=1)
            x_prev, cc = self.core.forward_cache(c)
            xs[:, t] = x_prev
            u_prev = controls[:, t]
            ccaches.append(cc)
        return xs, (acache, ccaches, h_star.shape)

    def backward(self, cache, g_states):
        acache, ccaches, (b, t_len, h_dim) = cache
        g_states = np.array(g_states, dtype=float)
        g_h = np.empty((b, t_len, h_dim))
        core_grads = [np.zeros_like(p) for p in self.core.parameters()]
        carry = np.zeros((b, self.state_dim))
        for t in range(t_len - 1, -1, -1):
            grads, gc = self.core.backward(ccaches[t], g_states[:, t] + carry)
            for acc, g in zip(core_grads, grads):
                acc += g
            g_h[:, t] = gc[:, :h_dim]
            carry = gc[:, h_dim:h_dim + self.state_dim]
        agg_grads = self.aggregator.backward(acache, g_h.reshape(b * t_len, h_dim))
        return agg_grads + core_grads

    def to_dict(self):
        return {"aggregator": self.aggregator.to_dict(), "core": self.core.to_dict(),
                "state_dim": self.state_dim, "control_dim": self.control_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(AttentionAggregator.from_dict(d["aggregator"]), Mlp.from_dict(d["core"]),
                   int(d["state_dim"]), int(d["control_dim"]))


@dataclass
class MomentumSGD:
    """Heavy-ball SGD with a cosine-decayed step and global-norm gradient clipping."""

    params: list
    lr: float
    total_steps: int
    momentum: float = 0.9
    clip_norm: float = 5.0
    step_count: int = 0
    _velocity: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._velocity = [np.zeros_like(p) for p in self.params]

    def current_lr(self) -> float:
        frac = min(self.step_count / max(self.total_steps, 1), 1.0)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self, grads) -> float:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        scale = min(1.0, self.clip_norm / norm) if norm > 0 else 1.0
        lr = self.current_lr()
        for p, v, g in zip(self.params, self._velocity, grads):
            v *= self.momentum
            v += scale * g
            p -= lr * v
        self.step_count += 1
        return norm
