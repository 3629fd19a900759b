"""Safety filters on the 2-D control: QP projection, majority MIQP, heuristic and consensus routes.

``qp_filter`` solves

    min ||u - u_ref||^2   s.t.  a_i^T u >= b_i,  lo <= u <= hi

with the Goldfarb-Idnani dual active-set method (identity Hessian, so the
unconstrained start is u_ref itself).  When the constraints have no common
point it returns the minimiser of the summed squared violations instead and
flags the result infeasible.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import ensemble as E
from .halfspace import ControlBox, HalfspaceConstraint
from .sim import World, WorldConfig, policy_control, render_frames

log = logging.getLogger(__name__)

MAX_MIQP = 12
TOL = 1e-10


class FilterError(ValueError):
    pass


@dataclass
class FilterResult:
    u_out: np.ndarray
    modified: bool
    active_constraints: tuple
    feasible: bool
    solver: str
    u_ref: np.ndarray = None
    multipliers: tuple = ()
    unsatisfiable: tuple = ()

    @property
    def cost(self) -> float:
        """Squared deviation; infeasible results count as infinitely expensive."""
        if not self.feasible:
            return math.inf
        d = self.u_out - self.u_ref
        return float(d @ d)

    @property
    def deviation(self) -> float:
        return float(np.linalg.norm(self.u_out - self.u_ref))


def _passthrough(u_ref, solver) -> FilterResult:
    return FilterResult(u_ref.copy(), False, (), True, solver, u_ref.copy())


def _prepare(constraints, box):
    """Stack constraints (box rows appended); split off zero-normal rows."""
    rows, tags, unsat = [], [], []
    for i, c in enumerate(constraints):
        if c.degenerate:
            if c.b > 0:
                unsat.append(i)
            continue
        rows.append((c.a, c.b))
        tags.append(i)
    if box is not None:
        for j, c in enumerate(box.as_halfspaces()):
            rows.append((c.a, c.b))
            tags.append(-1 - j)
    if rows:
        A = np.array([r[0] for r in rows], dtype=float)
        b = np.array([r[1] for r in rows], dtype=float)
    else:
        A, b = np.zeros((0, 2)), np.zeros(0)
    return A, b, tags, unsat


def _dual_active_set(u_ref, A, b, max_iter=200):
    """Goldfarb-Idnani with G = I.  Returns (u, active row ids, multipliers) or None if infeasible."""
    x = u_ref.astype(float).copy()
    active: list[int] = []
    lam: list[float] = []
    scale = 1.0 + np.abs(b).max(initial=0.0) + np.abs(A).max(initial=0.0) * (1.0 + np.abs(x).max())
    tol = 1e-12 * scale
    for _ in range(max_iter):
        s = A @ x - b
        p = int(np.argmin(s)) if len(s) else -1
        if p < 0 or s[p] >= -tol:
            return x, active, lam
        lam_p = 0.0
        while True:
            ap = A[p]
            if active:
                N = A[active].T  # (2, q)
                Ninv = np.linalg.pinv(N)  # (q, 2)
                z = ap - N @ (Ninv @ ap)
                r = Ninv @ ap
            else:
                z, r = ap.copy(), np.zeros(0)
            # dual step limit from multipliers that would turn negative
            t1, k = math.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-14 and lam[j] / rj < t1:
                    t1, k = lam[j] / rj, j
            zz = float(z @ ap)
            t2 = -float(ap @ x - b[p]) / zz if zz > 1e-14 * (1.0 + ap @ ap) else math.inf
            if math.isinf(t1) and math.isinf(t2):
                return None
            t = min(t1, t2)
            if math.isinf(t2):
                # dual-only step: drop the blocking constraint
                lam = [lj - t * rj for lj, rj in zip(lam, r)]
                lam_p += t
                del active[k]
                del lam[k]
                continue
            x = x + t * z
            lam = [lj - t * rj for lj, rj in zip(lam, r)]
            lam_p += t
            if t == t2:
                active.append(p)
                lam.append(lam_p)
                break
            del active[k]
            del lam[k]
    raise FilterError("active-set iteration limit reached")


def _least_violation(u_ref, constraints, box):
    A, b, _, _ = _prepare(constraints, None)

    def fun(u):
        v = np.maximum(b - A @ u, 0.0)
        d = u - u_ref
        return float(v @ v + 1e-9 * d @ d), -2.0 * A.T @ v + 2e-9 * d

    bounds = list(zip(box.lo, box.hi)) if box is not None else None
    x0 = box.clip(u_ref) if box is not None else u_ref
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 500})
    return np.asarray(res.x, dtype=float)


def qp_filter(u_ref, constraints, box: ControlBox | None = None) -> FilterResult:
    """Closest control to ``u_ref`` satisfying every half-space (and the box)."""
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    constraints = list(constraints)
    if not constraints:
        raise FilterError("qp_filter needs at least one constraint")
    A, b, tags, unsat = _prepare(constraints, box)
    if not unsat and np.all(A @ u_ref - b >= 0):
        return _passthrough(u_ref, "closed_form" if len(constraints) == 1 and box is None else "active_set")
    if not unsat and len(constraints) == 1 and box is None:
        c = constraints[0]
        step = max(0.0, (c.b - c.a @ u_ref) / (c.a @ c.a))
        u = u_ref + step * c.a
        return FilterResult(u, True, (0,), True, "closed_form", u_ref.copy(), (step,))
    # unit normals keep the active-set arithmetic well conditioned; multipliers are rescaled back
    norms = np.linalg.norm(A, axis=1)
    sol = None if unsat else _dual_active_set(u_ref, A / norms[:, None], b / norms)
    if sol is None:
        u = _least_violation(u_ref, constraints, box)
        return FilterResult(u, not np.array_equal(u, u_ref), (), False, "active_set", u_ref.copy(),
                            unsatisfiable=tuple(unsat))
    u, active, lam = sol
    pairs = sorted((tags[i], l / norms[i]) for i, l in zip(active, lam) if tags[i] >= 0)
    return FilterResult(u, not np.array_equal(u, u_ref), tuple(t for t, _ in pairs), True, "active_set",
                        u_ref.copy(), tuple(l for _, l in pairs))


def kkt_residual(res: FilterResult, constraints, box: ControlBox | None = None) -> float:
    """Stationarity + feasibility residual of a QP answer (non-negative multipliers fitted by NNLS)."""
    from scipy.optimize import nnls

    A, b, _, _ = _prepare(constraints, box)
    u = res.u_out
    slack = A @ u - b
    near = np.where(slack <= 1e-8 * (1 + np.abs(b)))[0]
    g = u - res.u_ref
    if len(near):
        _, rnorm = nnls(A[near].T, g)
    else:
        rnorm = float(np.linalg.norm(g))
    infeas = float(np.maximum(-slack, 0.0).max(initial=0.0))
    return max(rnorm, infeas)


# ---------------------------------------------------------------------------
# Majority-vote filtering


def majority_size(n: int) -> int:
    """Smallest strict majority of n voters."""
    return n // 2 + 1


def n_satisfied(constraints, u, tol=1e-9) -> int:
    return sum(c.holds(u, tol) for c in constraints)


def miqp_bruteforce(u_ref, constraints, box: ControlBox | None = None) -> FilterResult:
    """Exact closest control satisfying a strict majority, by enumerating constraint subsets."""
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    constraints = list(constraints)
    n = len(constraints)
    if n > MAX_MIQP:
        raise FilterError(f"{n} constraints exceed the enumeration bound {MAX_MIQP}; use heuristic_filter")
    if n == 0:
        raise FilterError("miqp_bruteforce needs at least one constraint")
    k = majority_size(n)
    inside = box is None or box.contains(u_ref)
    if inside and n_satisfied(constraints, u_ref, 0.0) >= k:
        return _passthrough(u_ref, "miqp_bruteforce")
    best = None
    for subset in itertools.combinations(range(n), k):
        res = qp_filter(u_ref, [constraints[i] for i in subset], box)
        if not res.feasible:
            continue
        if best is None or res.cost < best[0].cost - 1e-15:
            best = (res, subset)
    if best is None:
        res = qp_filter(u_ref, constraints, box)
        return FilterResult(res.u_out, res.modified, (), False, "miqp_bruteforce", u_ref.copy())
    res, subset = best
    return FilterResult(res.u_out, res.modified, tuple(subset[i] for i in res.active_constraints), True,
                        "miqp_bruteforce", u_ref.copy(), res.multipliers)


def heuristic_from_constraints(u_ref, constraints, box: ControlBox | None = None) -> FilterResult:
    """Majority vote on u_ref; if unsafe, satisfy exactly the constraints that voted unsafe."""
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    constraints = list(constraints)
    unsafe = [i for i, c in enumerate(constraints) if c.value(u_ref) < 0]
    if len(constraints) - len(unsafe) > len(unsafe):
        return _passthrough(u_ref, "heuristic")
    res = qp_filter(u_ref, [constraints[i] for i in unsafe], box)
    return FilterResult(res.u_out, res.modified, tuple(unsafe[i] for i in res.active_constraints), res.feasible,
                        "heuristic", u_ref.copy(), res.multipliers, res.unsatisfiable)


def heuristic_filter(u_ref, ens, xs, box: ControlBox | None = None) -> FilterResult:
    if ens.strategy != "majority_vote":
        raise FilterError("heuristic_filter needs a majority_vote ensemble")
    return heuristic_from_constraints(u_ref, E.member_constraints(ens, xs), box)


def consensus_filter(u_ref, ens, xs, box: ControlBox | None = None) -> FilterResult:
    u_ref = np.asarray(u_ref, dtype=float).reshape(-1)
    r = ens.roles
    c1 = E.member_constraint(ens.members[r.m1], xs[r.m1])
    c2 = E.member_constraint(ens.members[r.m2], xs[r.m2])
    verdict, m3_called = E.consensus_decide(ens, xs, u_ref)
    if verdict == E.SAFE:
        return _passthrough(u_ref, "heuristic" if m3_called else "closed_form")
    if not m3_called:
        c = c1 if E.decisive_member(ens) == r.m1 else c2
        res = qp_filter(u_ref, [c], box)
        return res
    return heuristic_filter(u_ref, r.m3, E._m3_states(ens, xs), box)


def filter_control(u_ref, ens, xs, box: ControlBox | None = None) -> FilterResult:
    """Apply the ensemble's own filtering rule."""
    if ens.strategy in E.AVERAGING:
        con = E.ensemble_constraint(ens, xs)
        return qp_filter(u_ref, [con], box)
    if ens.strategy == "majority_vote":
        return heuristic_filter(u_ref, ens, xs, box)
    return consensus_filter(u_ref, ens, xs, box)


# ---------------------------------------------------------------------------
# Closed loop


class FilterAgent:
    """Tracks every member's recurrent latent state along a live rollout."""

    def __init__(self, ens, config: WorldConfig, families: dict):
        self.ens = ens
        self.config = config
        missing = {m.family for m in ens.members} - set(families)
        if missing:
            raise FilterError(f"no embedding family definition for {sorted(missing)}")
        self.family_cfg = {f: config.replace(**families[f]) for f in {m.family for m in ens.members}}
        for m in ens.members:
            fc = self.family_cfg[m.family]
            agg = m.encoder.aggregator
            if fc.n_views != agg.pos.table.shape[0] or fc.embed_dim != agg.score_net.layer_dims[0] - agg.pos.table.shape[1]:
                raise FilterError(f"member {m.member_id} encoder does not match family {m.family!r}")
        self.reset()

    def reset(self):
        self.x = [np.zeros(m.encoder.state_dim) for m in self.ens.members]
        self.u_prev = np.zeros(2)

    def observe(self, frame):
        emb = {f: render_frames([frame], c)[0].astype(float) for f, c in self.family_cfg.items()}
        self.x = [m.encoder.step(emb[m.family], x, self.u_prev) for m, x in zip(self.ens.members, self.x)]
        return self.x

    def applied(self, u):
        self.u_prev = np.asarray(u, dtype=float).copy()


@dataclass
class RolloutReport:
    rows: list = field(default_factory=list)
    strategy: str = "none"

    @property
    def collision_rate(self) -> float:
        return float(np.mean([r["collision"] for r in self.rows])) if self.rows else 0.0

    @property
    def intervention_rate(self) -> float:
        return float(np.mean([r["intervention_rate"] for r in self.rows])) if self.rows else 0.0

    @property
    def mean_deviation(self) -> float:
        return float(np.mean([r["mean_deviation"] for r in self.rows])) if self.rows else 0.0

    def summary(self) -> dict:
        return {"strategy": self.strategy, "n_seeds": len(self.rows), "collision_rate": self.collision_rate,
                "intervention_rate": self.intervention_rate, "mean_deviation": self.mean_deviation}

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "rows": self.rows}, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["seed", "collision", "steps", "interventions", "intervention_rate", "mean_deviation"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: r[c] for c in cols})
        return buf.getvalue()


def rollout_once(config: WorldConfig, policy: str, seed: int, agent: FilterAgent | None = None,
                 box: ControlBox | None = None):
    """One closed-loop episode.  Returns (frames, collided, per-step (modified, deviation))."""
    world = World(config, seed)
    box = box or ControlBox.symmetric(config.control_limit)
    if agent is not None:
        agent.reset()
    frames, log_steps = [], []
    hit_at = None
    for t in range(config.horizon):
        world.check_collision()
        u_ref = policy_control(world, policy)
        if world.collided:
            u_ref = np.zeros(2)
            hit_at = t if hit_at is None else hit_at
        u = u_ref
        if agent is not None:
            xs = agent.observe(world.frame(u_ref))
            if not world.collided:
                res = filter_control(u_ref, agent.ens, xs, box)
                u = res.u_out
                log_steps.append((res.modified, res.deviation))
            agent.applied(u)
        frames.append(world.frame(u))
        if hit_at is not None and t - hit_at >= config.post_collision_frames:
            break
        world.step(u)
    return frames, world.collided, log_steps


def rollout_filtered(config: WorldConfig, policy: str, ens=None, seeds=(), families: dict | None = None,
                     box: ControlBox | None = None) -> RolloutReport:
    agent = FilterAgent(ens, config, families or {}) if ens is not None else None
    report = RolloutReport(strategy="none" if ens is None else ens.strategy)
    for seed in seeds:
        _, collided, steps = rollout_once(config, policy, int(seed), agent, box)
        n_mod = sum(m for m, _ in steps)
        report.rows.append({
            "seed": int(seed),
            "collision": bool(collided),
            "steps": len(steps),
            "interventions": int(n_mod),
            "intervention_rate": n_mod / len(steps) if steps else 0.0,
            "mean_deviation": float(np.mean([d for _, d in steps])) if steps else 0.0,
        })
    return report


def crash_prone_seeds(config: WorldConfig, n: int, start: int = 0, policy: str = "nominal") -> list[int]:
    """First ``n`` seeds from ``start`` whose unfiltered rollout collides."""
    from .sim import simulate_trajectory

    out, s = [], start
    while len(out) < n:
        if simulate_trajectory(config, policy, s)[1]:
            out.append(s)
        s += 1
    return out
