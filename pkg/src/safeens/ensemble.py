"""Ensembles of member filters: averaging, trained weights, majority voting, consensus routing.

Each member carries its own encoder, so a query is made with ``xs``: one latent
state per member, in member order.  The ``*_verdicts`` helpers at the bottom do
the same aggregation over whole datasets from precomputed member outputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .halfspace import HalfspaceConstraint
from .metrics import class_accuracies
from .nn import softmax
from .sim import LabeledDataset
from .train import FilterModel, MemberOutputs, cbf_value, constraint_arrays, member_outputs

log = logging.getLogger(__name__)

STRATEGIES = ("uniform_avg", "weighted_avg", "majority_vote", "consensus")
AVERAGING = ("uniform_avg", "weighted_avg")
SAFE, UNSAFE, ABSTAIN = "safe", "unsafe", "abstain"


class EnsembleError(ValueError):
    pass


@dataclass
class ConsensusRoles:
    m1: int
    m2: int
    m3: "Ensemble"
    mode: str = "non_specialized"

    def to_dict(self):
        return {"m1": self.m1, "m2": self.m2, "mode": self.mode, "m3": self.m3.describe()}


@dataclass
class Ensemble:
    members: list
    strategy: str
    weights: np.ndarray | None = None
    roles: ConsensusRoles | None = None
    name: str = ""
    m3_calls: int = 0
    queries: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise EnsembleError(f"unknown strategy {self.strategy!r}")
        if not self.members:
            raise EnsembleError("ensemble needs at least one member")
        n = len(self.members)
        if self.strategy in AVERAGING:
            w = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float)
            if w.shape != (n,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise EnsembleError("weights must lie on the simplex")
            self.weights = w
        elif self.weights is not None:
            raise EnsembleError(f"{self.strategy} ensembles carry no weights")
        if self.strategy == "consensus" and self.roles is None:
            raise EnsembleError("consensus ensembles need assigned roles")

    def __len__(self):
        return len(self.members)

    @property
    def m3_call_rate(self) -> float:
        return self.m3_calls / self.queries if self.queries else 0.0

    def reset_counters(self):
        self.m3_calls = 0
        self.queries = 0

    def describe(self) -> dict:
        return {
            "name": self.name,
            "strategy": self.strategy,
            "members": [m.member_id for m in self.members],
            "weights": None if self.weights is None else [float(w) for w in self.weights],
            "roles": None if self.roles is None else self.roles.to_dict(),
            "member_val_metrics": {m.member_id: m.val_metrics for m in self.members},
        }


def uniform(members, name="") -> Ensemble:
    return Ensemble(list(members), "uniform_avg", name=name)


def majority(members, name="") -> Ensemble:
    return Ensemble(list(members), "majority_vote", name=name)


# ---------------------------------------------------------------------------
# Constraints


def member_constraint(model: FilterModel, x) -> HalfspaceConstraint:
    a, b = constraint_arrays(model, x)
    return HalfspaceConstraint(a[0], b[0])


def _check_states(ens: Ensemble, xs):
    if len(xs) != len(ens.members):
        raise EnsembleError(f"expected {len(ens.members)} member states, got {len(xs)}")


def member_constraints(ens: Ensemble, xs) -> list[HalfspaceConstraint]:
    _check_states(ens, xs)
    return [member_constraint(m, x) for m, x in zip(ens.members, xs)]


def ensemble_constraint(ens: Ensemble, xs) -> HalfspaceConstraint:
    """Weighted sum of member half-spaces; exact because the class-K term is linear."""
    if ens.strategy not in AVERAGING:
        raise EnsembleError(f"{ens.strategy} ensembles have no single averaged constraint")
    cons = member_constraints(ens, xs)
    a = sum(w * c.a for w, c in zip(ens.weights, cons))
    b = sum(w * c.b for w, c in zip(ens.weights, cons))
    return HalfspaceConstraint(a, b)


# ---------------------------------------------------------------------------
# Votes


@dataclass
class Vote:
    verdicts: list
    tally: tuple = field(init=False)

    def __post_init__(self):
        n_safe = sum(v == SAFE for v in self.verdicts)
        n_unsafe = sum(v == UNSAFE for v in self.verdicts)
        self.tally = (n_safe, n_unsafe)

    @property
    def verdict(self) -> str:
        if self.tally == (0, 0):
            raise EnsembleError("every member abstained")
        # ties go to unsafe
        return SAFE if self.tally[0] > self.tally[1] else UNSAFE

    @property
    def safe(self) -> bool:
        return self.verdict == SAFE


def vote_state(ens: Ensemble, xs) -> Vote:
    _check_states(ens, xs)
    verdicts = []
    for m, x in zip(ens.members, xs):
        if not m.is_cbf:
            verdicts.append(ABSTAIN)
        else:
            verdicts.append(SAFE if float(cbf_value(m, np.atleast_2d(x))[0]) >= 0 else UNSAFE)
    vote = Vote(verdicts)
    vote.verdict  # raises when all abstain
    return vote


def vote_action(ens: Ensemble, xs, u) -> Vote:
    cons = member_constraints(ens, xs)
    return Vote([SAFE if c.value(u) >= 0 else UNSAFE for c in cons])


def action_safe(ens: Ensemble, xs, u) -> bool:
    """The ensemble's own safety test for (x, u) under its strategy."""
    if ens.strategy in AVERAGING:
        return ensemble_constraint(ens, xs).value(u) >= 0
    if ens.strategy == "majority_vote":
        return vote_action(ens, xs, u).safe
    return consensus_decide(ens, xs, u)[0] == SAFE


# ---------------------------------------------------------------------------
# Consensus


def consensus_decide(ens: Ensemble, xs, u) -> tuple[str, bool]:
    if ens.strategy != "consensus":
        raise EnsembleError("consensus_decide needs a consensus ensemble")
    _check_states(ens, xs)
    r = ens.roles
    ens.queries += 1
    v1 = SAFE if member_constraint(ens.members[r.m1], xs[r.m1]).value(u) >= 0 else UNSAFE
    v2 = SAFE if member_constraint(ens.members[r.m2], xs[r.m2]).value(u) >= 0 else UNSAFE
    if v1 == v2:
        return v1, False
    ens.m3_calls += 1
    return vote_action(r.m3, _m3_states(ens, xs), u).verdict, True


def _m3_states(ens: Ensemble, xs):
    ids = {id(m): i for i, m in enumerate(ens.members)}
    return [xs[ids[id(m)]] for m in ens.roles.m3.members]


def assign_consensus_roles(pool, metrics=None, mode: str = "non_specialized") -> ConsensusRoles:
    """Pick M1/M2 from validation action accuracies; M3 is majority vote over the pool.

    Ties go to the lowest member index.
    """
    pool = list(pool)
    if len(pool) < 3:
        raise EnsembleError("consensus needs at least three candidate members")
    metrics = [m.val_metrics for m in pool] if metrics is None else list(metrics)
    safe = np.array([m["safe_action_acc"] for m in metrics], dtype=float)
    unsafe = np.array([m["unsafe_action_acc"] for m in metrics], dtype=float)
    if mode == "specialized":
        m1 = int(np.argmax(safe))
        order = np.argsort(-unsafe, kind="stable")
        m2 = int(next(i for i in order if i != m1))
    elif mode == "non_specialized":
        order = np.argsort(np.abs(safe - unsafe), kind="stable")
        m1, m2 = int(order[0]), int(order[1])
    else:
        raise EnsembleError(f"unknown role mode {mode!r}")
    return ConsensusRoles(m1, m2, majority(pool, name="m3"), mode)


def consensus(pool, metrics=None, mode="non_specialized", name="") -> Ensemble:
    pool = list(pool)
    return Ensemble(pool, "consensus", roles=assign_consensus_roles(pool, metrics, mode), name=name)


def decisive_member(ens: Ensemble) -> int:
    """Of M1/M2, the one with higher validation unsafe-action accuracy (lower index on ties)."""
    r = ens.roles
    u1 = ens.members[r.m1].val_metrics.get("unsafe_action_acc", 0.0)
    u2 = ens.members[r.m2].val_metrics.get("unsafe_action_acc", 0.0)
    return r.m1 if u1 > u2 or (u1 == u2 and r.m1 < r.m2) else r.m2


# ---------------------------------------------------------------------------
# Weight training


def _weight_loss(z, rates, safe, lam):
    w = softmax(z)
    v = rates @ w
    n = len(v)
    lo = np.maximum(-v, 0.0)
    hi = np.maximum(v, 0.0)
    loss = float((lo[safe].sum() + lam * hi[~safe].sum()) / n)
    g_v = np.where(safe, -(v < 0).astype(float), lam * (v > 0)) / n
    g_w = rates.T @ g_v
    g_z = w * (g_w - w @ g_w)
    return loss, g_z


def train_weights(ens: Ensemble, data: LabeledDataset | None = None, lam: float = 18.0, lr: float = 1.0,
                  epochs: int = 200, outputs: list | None = None) -> np.ndarray:
    """Fit simplex weights (softmax of free logits) to the lambda-weighted hinge loss.

    Full-batch gradient steps; a step that would raise the loss is retried with
    half the step size, so the recorded loss never increases.
    """
    if ens.strategy != "weighted_avg":
        raise EnsembleError("train_weights needs a weighted_avg ensemble")
    outputs = outputs if outputs is not None else [member_outputs(m, data) for m in ens.members]
    rates = np.stack([o.rate for o in outputs], axis=1)
    safe = outputs[0].control_safe.astype(bool)
    if safe.all():
        raise EnsembleError("weight training needs unsafe-labeled controls")
    z = np.zeros(len(ens.members))
    loss, g = _weight_loss(z, rates, safe, lam)
    history = [loss]
    step = lr
    for _ in range(epochs):
        while step > 1e-8:
            z_new = z - step * g
            new_loss, new_g = _weight_loss(z_new, rates, safe, lam)
            if new_loss <= loss:
                z, loss, g = z_new, new_loss, new_g
                break
            step *= 0.5
        history.append(loss)
    w = softmax(z)
    w = w / w.sum()
    ens.weights = w
    ens.loss_history = history
    return w


# ---------------------------------------------------------------------------
# Dataset-level aggregation from precomputed member outputs


def _outputs_for(ens: Ensemble, outputs: dict):
    return [outputs[m.member_id] for m in ens.members]


def action_values(ens: Ensemble, outputs: dict) -> np.ndarray:
    if ens.strategy not in AVERAGING:
        raise EnsembleError("action values exist only for averaging ensembles")
    return np.stack([o.rate for o in _outputs_for(ens, outputs)], axis=1) @ ens.weights


def _majority(votes: np.ndarray, counted: np.ndarray | None = None) -> np.ndarray:
    """votes (N, K) bool safe-verdicts; counted (K,) which members vote."""
    if counted is not None:
        votes = votes[:, counted]
    if votes.shape[1] == 0:
        raise EnsembleError("every member abstained")
    n_safe = votes.sum(axis=1)
    return n_safe > votes.shape[1] - n_safe


def action_verdicts(ens: Ensemble, outputs: dict) -> np.ndarray:
    """Safe/unsafe verdict per frame for the logged controls; updates consensus counters."""
    outs = _outputs_for(ens, outputs)
    if ens.strategy in AVERAGING:
        return action_values(ens, outputs) >= 0
    votes = np.stack([o.action_verdicts() for o in outs], axis=1)
    if ens.strategy == "majority_vote":
        return _majority(votes)
    r = ens.roles
    v1, v2 = votes[:, r.m1], votes[:, r.m2]
    agree = v1 == v2
    m3 = action_verdicts(r.m3, outputs)
    ens.queries += len(agree)
    ens.m3_calls += int((~agree).sum())
    return np.where(agree, v1, m3)


def state_verdicts(ens: Ensemble, outputs: dict) -> np.ndarray | None:
    """Per-frame state verdicts, or None where the ensemble cannot classify states."""
    outs = _outputs_for(ens, outputs)
    cbf = np.array([o.is_cbf for o in outs])
    if ens.strategy in AVERAGING:
        if not cbf.all():
            return None
        return np.stack([o.b for o in outs], axis=1) @ ens.weights >= 0
    if ens.strategy == "majority_vote":
        if not cbf.any():
            return None
        votes = np.stack([o.b >= 0 if o.is_cbf else np.zeros(len(o.controls), bool) for o in outs], axis=1)
        return _majority(votes, cbf)
    return None


def ensemble_accuracies(ens: Ensemble, outputs: dict) -> dict:
    first = outputs[ens.members[0].member_id]
    res = {"action": class_accuracies(action_verdicts(ens, outputs), first.control_safe)}
    sv = state_verdicts(ens, outputs)
    res["state"] = None if sv is None else class_accuracies(sv, first.state_safe)
    return res


def outputs_by_id(members, data: LabeledDataset) -> dict[str, MemberOutputs]:
    return {m.member_id: member_outputs(m, data) for m in members}


# ---------------------------------------------------------------------------
# Standard ensemble set


def cell_members(pool, methods, families):
    return [m for m in pool if m.method in methods and m.family in families]


def ordered_methods(pool):
    order = ("idbf", "sablas", "dh")
    return sorted({m.method for m in pool}, key=order.index)


def standard_ensembles(pool, weight_outputs: dict, lam: float = 18.0, weight_epochs: int = 200,
                       weight_lr: float = 1.0):
    """Every aggregation over every method/family combination, plus the two consensus variants.

    Returns (ensemble, methods label, families label) triples.  Weighted
    ensembles are fitted on ``weight_outputs``.
    """
    pool = list(pool)
    methods = ordered_methods(pool)
    families = sorted({m.family for m in pool})
    method_combos = [(m,) for m in methods]
    if "sablas" in methods and "idbf" in methods:
        method_combos.append(("sablas", "idbf"))
    family_combos = [(f,) for f in families] + ([tuple(families)] if len(families) > 1 else [])
    entries = []
    for strategy in ("weighted_avg", "uniform_avg", "majority_vote"):
        for mc in method_combos:
            for fc in family_combos:
                members = cell_members(pool, mc, fc)
                if not members:
                    log.warning("no members for %s/%s", mc, fc)
                    continue
                ens = Ensemble(members, strategy, name=f"{strategy}:{'-'.join(mc)}:{'-'.join(fc)}")
                if strategy == "weighted_avg":
                    train_weights(ens, lam=lam, lr=weight_lr, epochs=weight_epochs,
                                  outputs=[weight_outputs[m.member_id] for m in members])
                entries.append((ens, "-".join(mc), "-".join(fc)))
    if len(pool) >= 3:
        for mode in ("specialized", "non_specialized"):
            entries.append((consensus(pool, mode=mode, name=f"consensus:{mode}"), "all", "-".join(families)))
    entries.append((majority(pool, name="majority_vote:all:" + "-".join(families)), "all", "-".join(families)))
    return entries


def find(entries, name: str) -> Ensemble:
    for ens, _, _ in entries:
        if ens.name == name:
            return ens
    raise KeyError(name)
