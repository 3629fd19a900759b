"""Self-check suite: gradient exactness, QP against a grid search, MIQP dominance."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ensemble as E
from . import filtering as F
from .gradcheck import check_directional
from .halfspace import ControlBox, HalfspaceConstraint
from .sim import WorldConfig, generate_dataset
from .train import LOSSES, METHODS, Batch, TrainConfig, new_model

log = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str


def tiny_batch(seed: int = 0):
    """A short labelled batch with padding and both label classes, for gradient checks."""
    world = WorldConfig(horizon=12, n_views=3, rays_per_view=4, embed_dim=6)
    data = generate_dataset(world, [0], 4, {"A": {}}, seed=seed, avoiding_fraction=0.5)
    for t in data.trajectories:
        n = len(t.frames)
        t.state_safe[:] = True
        t.control_safe[:] = True
        t.state_safe[n * 2 // 3:] = False
        t.control_safe[n // 3:n * 2 // 3] = False
    return data, Batch.from_dataset(data, "A")


def gradient_checks(n_points: int = 20, tol: float = 1e-4, seed: int = 0):
    rng = np.random.default_rng(seed)
    data, batch = tiny_batch(seed)
    cfg = TrainConfig(hidden=(8, 8), state_dim=4, encoder_hidden=8, dynamics_hidden=(8,))
    results = []
    for method in METHODS:
        model = new_model(method, "A", data, cfg, 0.2, rng)
        if model.dynamics is not None:
            for p in model.dynamics.parameters():
                p += 0.3 * rng.standard_normal(p.shape)
        for p in model.head_net.parameters():
            p += 0.5 * rng.standard_normal(p.shape)
        fn = LOSSES[method]
        results.append(check_directional(method, lambda: fn(model, batch, cfg)[0],
                                         lambda: fn(model, batch, cfg)[1], model.trainable_parameters(), rng,
                                         n_points, tol))
    model = new_model("sablas", "A", data, cfg, 0.2, rng)
    for p in model.dynamics.parameters():
        p += 0.3 * rng.standard_normal(p.shape)
    ev = batch.controls + rng.standard_normal(batch.controls.shape)
    results.append(check_directional("sablas-corrected", lambda: LOSSES["sablas"](model, batch, cfg, ev)[0],
                                     lambda: LOSSES["sablas"](model, batch, cfg, ev)[1],
                                     model.trainable_parameters(), rng, n_points, tol))
    # encoder stack under a random linear read-out
    enc = new_model("dh", "A", data, cfg, 0.2, rng).encoder
    proj = rng.standard_normal((batch.emb.shape[0], batch.emb.shape[1], enc.state_dim))

    def enc_loss():
        xs, _ = enc.forward(batch.emb, batch.controls)
        return float(np.sum(proj * xs))

    def enc_grad():
        _, cache = enc.forward(batch.emb, batch.controls)
        return enc.backward(cache, proj)

    results.append(check_directional("encoder", enc_loss, enc_grad, enc.parameters(), rng, n_points, tol))
    # ensemble weight loss w.r.t. the free logits
    rates = rng.standard_normal((60, 5))
    safe = rng.random(60) > 0.3
    z = [rng.standard_normal(5)]
    results.append(check_directional("weights", lambda: E._weight_loss(z[0], rates, safe, 18.0)[0],
                                     lambda: [E._weight_loss(z[0], rates, safe, 18.0)[1]], z, rng, n_points, tol))
    return results


def random_instance(rng, n_max=5, limit=3.0):
    k = int(rng.integers(1, n_max + 1))
    cons = [HalfspaceConstraint(rng.standard_normal(2), rng.normal(0.0, 1.5)) for _ in range(k)]
    return rng.uniform(-1.3 * limit, 1.3 * limit, 2), cons, ControlBox.symmetric(limit)


def _grid(lo, hi, n):
    gx = np.linspace(lo[0], hi[0], n)
    gy = np.linspace(lo[1], hi[1], n)
    return np.stack(np.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 2)


def _feasible(G, cons, box=None):
    ok = np.ones(len(G), dtype=bool)
    for c in cons:
        ok &= G @ c.a - c.b >= 0
    if box is not None:
        ok &= np.all((G >= box.lo) & (G <= box.hi), axis=1)
    return ok


def grid_optimum(u_ref, cons, box, n=400):
    G = _grid(box.lo, box.hi, n)
    ok = _feasible(G, cons)
    if not ok.any():
        return None
    d = np.sum((G[ok] - u_ref) ** 2, axis=1)
    return float(d.min())


def _cell_tol(cost, cell):
    # moving the optimum by one cell diagonal changes the squared distance by at most this
    return 2 * math.sqrt(cost) * cell + cell ** 2 + 1e-12


def qp_grid_check(n: int = 100, seed: int = 0, grid: int = 400):
    """QP optimum against a grid search over the box.

    Instances are drawn until ``n`` have a feasible grid point.  The QP must be feasible, satisfy KKT, never lose to a feasible grid point, and
    sit within one cell's worth of the grid optimum.  The last test needs a
    feasible grid point within one cell diagonal of the optimum; where the
    feasible set is a sliver thinner than the grid spacing there is none, the
    grid cannot resolve the optimum, and only the first three tests apply.
    Such instances are counted and reported.
    """
    rng = np.random.default_rng(seed)
    worst_gap, worst_kkt, n_feas, slivers = 0.0, 0.0, 0, []
    failures = []
    i = -1
    while n_feas < n:
        i += 1
        u_ref, cons, box = random_instance(rng)
        G = _grid(box.lo, box.hi, grid)
        ok = _feasible(G, cons)
        if not ok.any():
            continue
        n_feas += 1
        res = F.qp_filter(u_ref, cons, box)
        g = float(np.min(np.sum((G[ok] - u_ref) ** 2, axis=1)))
        cell = math.hypot(box.hi[0] - box.lo[0], box.hi[1] - box.lo[1]) / (grid - 1)
        worst_kkt = max(worst_kkt, F.kkt_residual(res, cons, box) if res.feasible else math.inf)
        if not res.feasible or res.cost > g + 1e-9:
            failures.append(i)
            continue
        if np.min(np.linalg.norm(G[ok] - res.u_out, axis=1)) > cell:
            slivers.append(i)
            continue
        gap = (g - res.cost) / _cell_tol(res.cost, cell)
        worst_gap = max(worst_gap, gap)
        if gap > 1.0:
            failures.append(i)
    ok = bool(not failures and worst_kkt < 1e-6)
    return SuiteResult("qp-vs-grid", ok, f"{n_feas} instances, worst gap {worst_gap:.3f} cells, "
                                         f"unresolved slivers {slivers}, worst KKT {worst_kkt:.2e}, "
                                         f"failures {failures}")


def miqp_dominance_check(n: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    box = ControlBox.symmetric(3.0)
    bad, ties = [], []
    for i in range(n):
        k = int(rng.choice([3, 5, 7]))
        cons = [HalfspaceConstraint(rng.standard_normal(2), rng.normal(0.0, 1.5)) for _ in range(k)]
        u_ref = rng.uniform(-3, 3, 2)
        exact = F.miqp_bruteforce(u_ref, cons, box)
        heur = F.heuristic_from_constraints(u_ref, cons, box)
        if exact.feasible and F.n_satisfied(cons, exact.u_out, 1e-7) < F.majority_size(k):
            bad.append((i, "majority"))
        if heur.cost < exact.cost - 1e-9:
            bad.append((i, "dominance"))
        if abs(heur.cost - exact.cost) <= 1e-9 or (math.isinf(heur.cost) and math.isinf(exact.cost)):
            ties.append(i)
    log.info("miqp-dominance: heuristic equals the oracle on instances %s", ties)
    return SuiteResult("miqp-dominance", not bad, f"{n} instances, {len(ties)} ties, violations {bad}")


def run_suite(n_points: int = 20):
    out = [SuiteResult(f"grad:{r.name}", r.ok, f"worst rel err {r.worst:.2e} over {r.n_points} points")
           for r in gradient_checks(n_points)]
    out.append(qp_grid_check())
    out.append(miqp_dominance_check())
    return out
