"""Member filter models: latent dynamics, barrier and hyperplane heads, and their training.

Three training routes share the recurrent encoder:

* ``idbf``   -- barrier B with the analytic rate grad B . (f + g u) + alpha B, dynamics frozen;
* ``sablas`` -- barrier B whose rate on logged transitions is corrected with the
  observed next state, so the learned model only enters through the control offset;
* ``dh``     -- a state-dependent hyperplane a(x)^T u >= b(x), no dynamics.

All losses are ReLU hinges and every gradient is written out by hand.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import class_accuracies
from .nn import Mlp, MomentumSGD, StateEncoder
from .sim import LabeledDataset

log = logging.getLogger(__name__)

METHODS = ("idbf", "sablas", "dh")
GEOMETRIES = {
    "member": (64, 64),
    "large-deep": (95, 95, 95, 95, 95),
    "large-wide": (220, 220),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 0.01
    margin: float = 0.05
    lambda_unsafe: float = 18.0
    seed: int = 0
    gamma_alpha: float = 1.0
    state_dim: int = 16
    encoder_hidden: int = 64
    hidden: tuple = GEOMETRIES["member"]
    dynamics_epochs: int = 60
    dynamics_lr: float = 0.01
    dynamics_hidden: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "dynamics_hidden", tuple(int(h) for h in self.dynamics_hidden))
        if not self.lambda_unsafe > 1:
            raise ValueError("lambda_unsafe must exceed 1")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.gamma_alpha <= 0:
            raise ValueError("gamma_alpha must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("bad optimisation settings")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["dynamics_hidden"] = list(self.dynamics_hidden)
        return d


# ---------------------------------------------------------------------------
# Model pieces


@dataclass
class DynamicsHeads:
    """Control-affine latent dynamics xdot = f(x) + g(x) u."""

    f_net: Mlp
    g_net: Mlp
    state_dim: int
    control_dim: int = 2
    val_mse: float | None = None

    @classmethod
    def init(cls, state_dim, rng, hidden=(64, 64), control_dim=2):
        f = Mlp.init([state_dim, *hidden, state_dim], rng, "tanh", out_scale=0.1)
        g = Mlp.init([state_dim, *hidden, state_dim * control_dim], rng, "tanh", out_scale=0.1)
        return cls(f, g, state_dim, control_dim)

    def parameters(self):
        return self.f_net.parameters() + self.g_net.parameters()

    def forward(self, x):
        x = np.atleast_2d(x)
        f, fc = self.f_net.forward_cache(x)
        graw, gc = self.g_net.forward_cache(x)
        return f, graw.reshape(-1, self.state_dim, self.control_dim), (fc, gc)

    def xdot(self, x, u):
        f, g, _ = self.forward(x)
        return f + np.einsum("nsk,nk->ns", g, np.atleast_2d(u))

    def backward(self, cache, g_f, g_g):
        """Returns (parameter grads, input grad) given upstream w.r.t. f (N,S) and g (N,S,K)."""
        fc, gc = cache
        pf, xf = self.f_net.backward(fc, g_f)
        pg, xg = self.g_net.backward(gc, g_g.reshape(len(g_g), -1))
        return pf + pg, xf + xg

    def to_dict(self):
        return {"f_net": self.f_net.to_dict(), "g_net": self.g_net.to_dict(), "state_dim": self.state_dim,
                "control_dim": self.control_dim, "val_mse": self.val_mse}

    @classmethod
    def from_dict(cls, d):
        return cls(Mlp.from_dict(d["f_net"]), Mlp.from_dict(d["g_net"]), int(d["state_dim"]),
                   int(d["control_dim"]), d.get("val_mse"))


@dataclass
class CbfHead:
    b_net: Mlp


@dataclass
class DhHead:
    ab_net: Mlp

    def split(self, x):
        out = np.atleast_2d(self.ab_net.forward(x))
        return out[:, :-1], out[:, -1]


@dataclass
class FilterModel:
    encoder: StateEncoder
    head: CbfHead | DhHead
    method: str
    family: str
    dynamics: DynamicsHeads | None = None
    gamma_alpha: float = 1.0
    dt: float = 0.2
    seed: int = 0
    hyperparams: dict = field(default_factory=dict)
    val_metrics: dict = field(default_factory=dict)
    member_id: str = ""
    geometry: str = "member"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.gamma_alpha <= 0:
            raise ValueError("gamma_alpha must be positive")
        if (self.method == "dh") != isinstance(self.head, DhHead):
            raise ValueError(f"method {self.method!r} does not match head {type(self.head).__name__}")
        if self.method != "dh" and self.dynamics is None:
            raise ValueError("barrier members need a dynamics model")

    @property
    def is_cbf(self) -> bool:
        return self.method != "dh"

    @property
    def head_net(self) -> Mlp:
        return self.head.b_net if self.is_cbf else self.head.ab_net

    def trainable_parameters(self):
        return self.encoder.parameters() + self.head_net.parameters()

    def encode(self, emb, controls):
        xs, _ = self.encoder.forward(emb, controls)
        return xs

    def n_params(self) -> int:
        return self.head_net.n_params


# ---------------------------------------------------------------------------
# Barrier quantities


def _require_cbf(model: FilterModel):
    if not model.is_cbf:
        raise TypeError(f"{model.member_id or model.method} is a hyperplane model and has no barrier")


def cbf_value(model: FilterModel, x):
    _require_cbf(model)
    out = model.head.b_net.forward(x)
    return out[..., 0]


def cbf_gradient(model: FilterModel, x):
    """(B(x), grad_x B(x)) for a batch of latent states."""
    _require_cbf(model)
    y, gx = model.head.b_net.input_gradient(np.atleast_2d(x))
    return y[:, 0], gx


def cbf_rate(model: FilterModel, x, u):
    """grad B(x) . (f(x) + g(x) u) + alpha B(x)."""
    _require_cbf(model)
    single = np.ndim(x) == 1
    x2, u2 = np.atleast_2d(x), np.atleast_2d(u)
    v = model.dynamics.xdot(x2, u2)
    b, bdot, _ = model.head.b_net.jvp(x2, v)
    r = bdot[:, 0] + model.gamma_alpha * b[:, 0]
    return r[0] if single else r


def constraint_arrays(model: FilterModel, x):
    """Half-space (a, b) with safe set a^T u >= b, for a batch of latent states.

    Barrier members: a = (grad B . g)^T, b = -grad B . f - alpha B.
    Hyperplane members: the head outputs as they are.
    """
    x2 = np.atleast_2d(x)
    if model.is_cbf:
        bval, grad = cbf_gradient(model, x2)
        f, g, _ = model.dynamics.forward(x2)
        a = np.einsum("ns,nsk->nk", grad, g)
        b = -np.einsum("ns,ns->n", grad, f) - model.gamma_alpha * bval
    else:
        a, b = model.head.split(x2)
    return a, b


def sablas_rate(model: FilterModel, x, x_next, u_logged, u=None):
    """Discrepancy-corrected rate [B(x_next + dt g(x)(u - u_logged)) - B(x)] / dt + alpha B(x).

    The nominal prediction under the evaluated control is shifted by the
    observed model error at the logged control, so only the control offset
    goes through the learned dynamics.  ``u=None`` means the logged control.
    """
    _require_cbf(model)
    x, x_next = np.atleast_2d(x), np.atleast_2d(x_next)
    z = x_next
    if u is not None:
        _, g, _ = model.dynamics.forward(x)
        du = np.atleast_2d(u) - np.atleast_2d(u_logged)
        z = x_next + model.dt * np.einsum("nsk,nk->ns", g, du)
    b_now = model.head.b_net.forward(x)[:, 0]
    b_next = model.head.b_net.forward(z)[:, 0]
    return (b_next - b_now) / model.dt + model.gamma_alpha * b_now


# ---------------------------------------------------------------------------
# Losses


@dataclass
class Batch:
    emb: np.ndarray  # (B, T, M, D)
    controls: np.ndarray  # (B, T, 2)
    state_safe: np.ndarray  # (B, T) bool
    control_safe: np.ndarray  # (B, T) bool
    valid: np.ndarray | None = None  # (B, T) bool, False on padding

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.state_safe.shape, dtype=bool)

    @classmethod
    def from_dataset(cls, data: LabeledDataset, family: str, idx=None):
        trajs = data.trajectories if idx is None else [data.trajectories[i] for i in idx]
        sub = LabeledDataset(trajs)
        return cls(sub.embeddings(family), sub.controls(), sub.state_safe(), sub.control_safe(), sub.valid())

    def take(self, idx) -> "Batch":
        v = self.valid[idx]
        t = int(v.sum(axis=1).max())
        return Batch(self.emb[idx, :t], self.controls[idx, :t], self.state_safe[idx, :t],
                     self.control_safe[idx, :t], v[:, :t])


def hinge_pair(values, safe, margin, lam, denom, mask=None):
    """Loss and gradient of sum(relu(m - v) on safe) + lam * sum(relu(m + v) on unsafe), over denom.

    Entries with ``mask`` False contribute nothing.
    """
    safe = safe.astype(bool)
    w = np.where(safe, 1.0, lam)
    if mask is not None:
        w = w * mask
    viol = np.where(safe, margin - values, margin + values)
    loss = float(np.sum(w * np.maximum(viol, 0.0)) / denom)
    grad = w * (viol > 0) * np.where(safe, -1.0, 1.0) / denom
    return loss, grad


def idbf_loss(model: FilterModel, batch: Batch, cfg: TrainConfig):
    bsz, t_len = batch.state_safe.shape
    n = bsz * t_len
    mask = batch.valid.ravel()
    n_valid = max(int(mask.sum()), 1)
    xs, ecache = model.encoder.forward(batch.emb, batch.controls)
    x = xs.reshape(n, -1)
    u = batch.controls.reshape(n, -1)
    f, g, dcache = model.dynamics.forward(x)
    v = f + np.einsum("nsk,nk->ns", g, u)
    bval, bdot, hcache = model.head.b_net.jvp(x, v)
    bval, bdot = bval[:, 0], bdot[:, 0]
    rate = bdot + model.gamma_alpha * bval
    l_state, g_b = hinge_pair(bval, batch.state_safe.ravel(), cfg.margin, 1.0, n_valid, mask)
    l_ctrl, g_rate = hinge_pair(rate, batch.control_safe.ravel(), cfg.margin, cfg.lambda_unsafe, n_valid, mask)
    g_b = g_b + model.gamma_alpha * g_rate
    head_grads, gx, gv = model.head.b_net.jvp_backward(hcache, g_b[:, None], g_rate[:, None])
    _, gx_dyn = model.dynamics.backward(dcache, gv, gv[:, :, None] * u[:, None, :])
    gx = gx + gx_dyn
    enc_grads = model.encoder.backward(ecache, gx.reshape(xs.shape))
    return l_state + l_ctrl, enc_grads + head_grads


def sablas_loss(model: FilterModel, batch: Batch, cfg: TrainConfig, eval_controls=None):
    """Barrier hinge losses with the corrected rate on each observed transition.

    ``eval_controls`` (B, T, 2) evaluates the rate at controls other than the
    logged ones, which routes gradients through the correction term; training
    uses the logged controls.
    """
    bsz, t_len = batch.state_safe.shape
    n = bsz * t_len
    mask = batch.valid.ravel()
    pair_mask = batch.valid[:, 1:].ravel()  # both ends of the transition are real frames
    dt, alpha = model.dt, model.gamma_alpha
    xs, ecache = model.encoder.forward(batch.emb, batch.controls)
    s_dim = xs.shape[-1]
    x_now = xs[:, :-1].reshape(-1, s_dim)
    z = xs[:, 1:].reshape(-1, s_dim)
    corrected = eval_controls is not None
    if corrected:
        du = (np.asarray(eval_controls)[:, :-1] - batch.controls[:, :-1]).reshape(-1, 2)
        _, g, dcache = model.dynamics.forward(x_now)
        z = z + dt * np.einsum("nsk,nk->ns", g, du)
    b_all, cache_all = model.head.b_net.forward_cache(xs.reshape(n, s_dim))
    b_all = b_all[:, 0]
    b_z, cache_z = model.head.b_net.forward_cache(z)
    b_z = b_z[:, 0]
    b_now = b_all.reshape(bsz, t_len)[:, :-1].ravel()
    rate = (b_z - b_now) / dt + alpha * b_now
    n_pairs = max(int(pair_mask.sum()), 1)
    l_state, g_b = hinge_pair(b_all, batch.state_safe.ravel(), cfg.margin, 1.0, max(int(mask.sum()), 1), mask)
    l_ctrl, g_rate = hinge_pair(rate, batch.control_safe[:, :-1].ravel(), cfg.margin, cfg.lambda_unsafe,
                                n_pairs, pair_mask)
    g_b = g_b.reshape(bsz, t_len)
    g_b[:, :-1] += (g_rate * (alpha - 1.0 / dt)).reshape(bsz, t_len - 1)
    head_a, gx_all = model.head.b_net.backward(cache_all, g_b.reshape(n, 1))
    head_z, gz = model.head.b_net.backward(cache_z, (g_rate / dt)[:, None])
    g_xs = gx_all.reshape(bsz, t_len, s_dim)
    g_xs[:, 1:] += gz.reshape(bsz, t_len - 1, s_dim)
    if corrected:
        g_g = dt * gz[:, :, None] * du[:, None, :]
        _, gx_dyn = model.dynamics.backward(dcache, np.zeros_like(gz), g_g)
        g_xs[:, :-1] += gx_dyn.reshape(bsz, t_len - 1, s_dim)
    enc_grads = model.encoder.backward(ecache, g_xs)
    head_grads = [a + b for a, b in zip(head_a, head_z)]
    return l_state + l_ctrl, enc_grads + head_grads


def dh_loss(model: FilterModel, batch: Batch, cfg: TrainConfig):
    bsz, t_len = batch.state_safe.shape
    n = bsz * t_len
    xs, ecache = model.encoder.forward(batch.emb, batch.controls)
    x = xs.reshape(n, -1)
    u = batch.controls.reshape(n, -1)
    out, hcache = model.head.ab_net.forward_cache(x)
    a, b = out[:, :-1], out[:, -1]
    val = np.einsum("nk,nk->n", a, u) - b
    mask = batch.valid.ravel()
    loss, g_val = hinge_pair(val, batch.control_safe.ravel(), cfg.margin, cfg.lambda_unsafe,
                             max(int(mask.sum()), 1), mask)
    g_out = np.concatenate([g_val[:, None] * u, -g_val[:, None]], axis=1)
    head_grads, gx = model.head.ab_net.backward(hcache, g_out)
    enc_grads = model.encoder.backward(ecache, gx.reshape(xs.shape))
    return loss, enc_grads + head_grads


LOSSES = {"idbf": idbf_loss, "sablas": sablas_loss, "dh": dh_loss}


# ---------------------------------------------------------------------------
# Training


def _embed_dims(data: LabeledDataset, family: str):
    e = data.trajectories[0].embeddings[family]
    return e.shape[1], e.shape[2]


def fit_dynamics(states, controls, next_states, dt, cfg: TrainConfig, rng=None, val=None,
                 heads: DynamicsHeads | None = None) -> DynamicsHeads:
    """Least-squares fit of x' ~ x + dt (f(x) + g(x) u) by momentum SGD.

    The residual is divided by dt (same minimiser, better-scaled gradients).
    ``val`` is an optional (states, controls, next_states) triple for the
    recorded validation MSE, measured on x' itself.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    s_dim = states.shape[1]
    heads = heads or DynamicsHeads.init(s_dim, rng, cfg.dynamics_hidden, controls.shape[1])
    target = (next_states - states) / dt
    n = len(states)
    bs = max(64, min(1024, n // 8 or 1))
    steps = cfg.dynamics_epochs * math.ceil(n / bs)
    opt = MomentumSGD(heads.parameters(), cfg.dynamics_lr, steps)
    for _ in range(cfg.dynamics_epochs):
        perm = rng.permutation(n)
        for k in range(0, n, bs):
            idx = perm[k:k + bs]
            f, g, cache = heads.forward(states[idx])
            pred = f + np.einsum("nsk,nk->ns", g, controls[idx])
            err = pred - target[idx]
            loss = float(np.mean(np.sum(err * err, axis=1)))
            if not np.isfinite(loss):
                raise TrainingError(f"dynamics loss became non-finite ({loss}) at step {opt.step_count}")
            g_pred = 2.0 * err / len(idx)
            grads, _ = heads.backward(cache, g_pred, g_pred[:, :, None] * controls[idx][:, None, :])
            opt.step(grads)
    vs, vu, vn = val if val is not None else (states, controls, next_states)
    pred = vs + dt * heads.xdot(vs, vu)
    heads.val_mse = float(np.mean(np.sum((pred - vn) ** 2, axis=1)))
    return heads


def _transitions(model_or_encoder, data: LabeledDataset, family: str):
    enc = model_or_encoder.encoder if isinstance(model_or_encoder, FilterModel) else model_or_encoder
    xs, _ = enc.forward(data.embeddings(family), data.controls())
    us = data.controls()
    keep = data.valid()[:, 1:]
    return xs[:, :-1][keep], us[:, :-1][keep], xs[:, 1:][keep]


def train_dynamics(dataset: LabeledDataset, encoder: StateEncoder, config: TrainConfig, family: str,
                   dt: float, val: LabeledDataset | None = None, rng=None) -> DynamicsHeads:
    tr = _transitions(encoder, dataset, family)
    va = _transitions(encoder, val, family) if val is not None and len(val) else None
    return fit_dynamics(*tr, dt, config, rng=rng, val=va)


def _check_labels(dataset: LabeledDataset, need_states: bool):
    if not len(dataset):
        raise ValueError("empty training set")
    v = dataset.valid()
    ss, cs = dataset.state_safe()[v], dataset.control_safe()[v]
    if need_states and (ss.all() or (~ss).all()):
        raise ValueError("training set needs both safe and unsafe state labels")
    if cs.all() or (~cs).all():
        raise ValueError("training set needs both safe and unsafe control labels")


def new_model(method: str, family: str, dataset: LabeledDataset, cfg: TrainConfig, dt: float,
              rng: np.random.Generator) -> FilterModel:
    n_views, embed_dim = _embed_dims(dataset, family)
    enc = StateEncoder.init(embed_dim, n_views, rng, cfg.state_dim, cfg.encoder_hidden)
    dims = [cfg.state_dim, *cfg.hidden]
    if method == "dh":
        head = DhHead(Mlp.init(dims + [3], rng, "tanh", out_scale=0.1))
        dyn = None
    else:
        head = CbfHead(Mlp.init(dims + [1], rng, "tanh", out_scale=0.1))
        dyn = DynamicsHeads.init(cfg.state_dim, rng, cfg.dynamics_hidden)
    return FilterModel(enc, head, method, family, dyn, cfg.gamma_alpha, dt, cfg.seed, cfg.to_dict())


def fit_model(model: FilterModel, dataset: LabeledDataset, cfg: TrainConfig, rng) -> list[float]:
    """Minibatch training of encoder + head with the model's own loss; returns per-epoch mean loss."""
    loss_fn = LOSSES[model.method]
    full = Batch.from_dataset(dataset, model.family)
    n = len(dataset)
    steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    opt = MomentumSGD(model.trainable_parameters(), cfg.learning_rate, steps)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for k in range(0, n, cfg.batch_size):
            idx = perm[k:k + cfg.batch_size]
            batch = full.take(idx)
            loss, grads = loss_fn(model, batch, cfg)
            if not np.isfinite(loss):
                raise TrainingError(f"{model.method} loss non-finite at epoch {epoch}")
            opt.step(grads)
            total += loss * len(idx)
        history.append(total / n)
    return history


def _train(method, dataset, config, family, dt, val):
    _check_labels(dataset, need_states=method != "dh")
    rng = np.random.default_rng([config.seed, METHODS.index(method)])
    model = new_model(method, family, dataset, config, dt, rng)
    if model.is_cbf:
        # staged: dynamics first on the initial encoder, then frozen
        model.dynamics = train_dynamics(dataset, model.encoder, config, family, dt, val, rng)
    history = fit_model(model, dataset, config, rng)
    if method == "sablas":
        # the corrected rate never queries the nominal model at logged controls,
        # so refit it to the trained encoder for the affine constraint used downstream
        model.dynamics = train_dynamics(dataset, model.encoder, config, family, dt, val, rng)
    model.hyperparams["loss_history"] = [float(h) for h in history]
    if val is not None and len(val):
        model.val_metrics = validation_metrics(model, val)
    return model


def train_idbf(dataset, config: TrainConfig, family: str, dt: float, val=None) -> FilterModel:
    return _train("idbf", dataset, config, family, dt, val)


def train_sablas_offline(dataset, config: TrainConfig, family: str, dt: float, val=None) -> FilterModel:
    return _train("sablas", dataset, config, family, dt, val)


def train_dh(dataset, config: TrainConfig, family: str, dt: float, val=None) -> FilterModel:
    return _train("dh", dataset, config, family, dt, val)


TRAINERS = {"idbf": train_idbf, "sablas": train_sablas_offline, "dh": train_dh}


# ---------------------------------------------------------------------------
# Outputs on datasets


@dataclass
class MemberOutputs:
    """Per-frame outputs of one member over a dataset, real frames flattened in (trajectory, time) order."""

    member_id: str
    is_cbf: bool
    b: np.ndarray | None  # barrier values, None for hyperplane members
    a_vec: np.ndarray  # (N, 2)
    b_off: np.ndarray  # (N,)
    controls: np.ndarray
    state_safe: np.ndarray
    control_safe: np.ndarray

    @property
    def rate(self) -> np.ndarray:
        """Constraint value a^T u - b at the logged control (the barrier rate for CBF members)."""
        return np.einsum("nk,nk->n", self.a_vec, self.controls) - self.b_off

    def state_verdicts(self):
        return None if self.b is None else self.b >= 0

    def action_verdicts(self):
        return self.rate >= 0


def member_outputs(model: FilterModel, data: LabeledDataset) -> MemberOutputs:
    xs = model.encode(data.embeddings(model.family), data.controls())
    v = data.valid()
    x = xs[v]
    a, b = constraint_arrays(model, x)
    bval = cbf_value(model, x) if model.is_cbf else None
    return MemberOutputs(model.member_id, model.is_cbf, bval, a, b, data.controls()[v],
                         data.state_safe()[v], data.control_safe()[v])


def validation_metrics(model: FilterModel, val: LabeledDataset) -> dict:
    out = member_outputs(model, val)
    act = class_accuracies(out.action_verdicts(), out.control_safe)
    m = {"safe_action_acc": act["safe_acc"], "unsafe_action_acc": act["unsafe_acc"]}
    if out.b is not None:
        st = class_accuracies(out.state_verdicts(), out.state_safe)
        m.update(safe_state_acc=st["safe_acc"], unsafe_state_acc=st["unsafe_acc"])
    return m


# ---------------------------------------------------------------------------
# Pools


def derive_seed(*parts) -> int:
    h = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(h[:4], "little")


def jitter_config(base: TrainConfig, seed: int) -> TrainConfig:
    rng = np.random.default_rng(seed)
    return base.replace(
        seed=seed,
        learning_rate=float(base.learning_rate * rng.uniform(0.75, 1.3)),
        margin=float(base.margin * rng.uniform(0.8, 1.25)),
        batch_size=int(max(4, round(base.batch_size * rng.choice([0.75, 1.0, 1.25])))),
    )


def train_member_pool(dataset: LabeledDataset, methods, families, n_per_cell: int = 5,
                      geometry: str = "member", base: TrainConfig | None = None, dt: float = 0.2,
                      val: LabeledDataset | None = None, pool_seed: int = 0, progress=None) -> list[FilterModel]:
    """Train ``n_per_cell`` members for every (method, family) cell with jittered settings."""
    if n_per_cell < 1:
        raise ValueError("n_per_cell must be >= 1")
    if geometry not in GEOMETRIES:
        raise ValueError(f"unknown geometry {geometry!r}")
    base = base or TrainConfig()
    base = base.replace(hidden=GEOMETRIES[geometry])
    pool = []
    for method in methods:
        for family in families:
            for i in range(n_per_cell):
                seed = derive_seed(pool_seed, method, family, geometry, i)
                cfg = jitter_config(base, seed)
                model = TRAINERS[method](dataset, cfg, family, dt, val)
                model.member_id = f"{method}-{family}-{geometry}-{i}"
                model.geometry = geometry
                pool.append(model)
                if progress:
                    progress(model)
    return pool


# ---------------------------------------------------------------------------
# Serialisation


def model_to_dict(model: FilterModel) -> dict:
    return {
        "member_id": model.member_id,
        "method": model.method,
        "family": model.family,
        "geometry": model.geometry,
        "gamma_alpha": model.gamma_alpha,
        "dt": model.dt,
        "seed": model.seed,
        "hyperparams": model.hyperparams,
        "val_metrics": model.val_metrics,
        "encoder": model.encoder.to_dict(),
        "head": model.head_net.to_dict(),
        "dynamics": model.dynamics.to_dict() if model.dynamics is not None else None,
    }


def model_from_dict(d: dict) -> FilterModel:
    net = Mlp.from_dict(d["head"])
    head = DhHead(net) if d["method"] == "dh" else CbfHead(net)
    dyn = DynamicsHeads.from_dict(d["dynamics"]) if d["dynamics"] is not None else None
    return FilterModel(StateEncoder.from_dict(d["encoder"]), head, d["method"], d["family"], dyn,
                       float(d["gamma_alpha"]), float(d["dt"]), int(d["seed"]), d["hyperparams"],
                       d["val_metrics"], d["member_id"], d.get("geometry", "member"))
