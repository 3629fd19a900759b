from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from safeens import ensemble as E
from safeens import filtering as F
from safeens.halfspace import ControlBox, HalfspaceConstraint
from safeens.verify import grid_optimum, miqp_dominance_check, qp_grid_check

BOX = ControlBox.symmetric(3.0)

finite = st.floats(-3, 3, allow_nan=False)
vec2 = st.tuples(finite, finite).map(np.array)
constraint = st.builds(lambda a, b: HalfspaceConstraint(a, b),
                       vec2.filter(lambda a: np.linalg.norm(a) > 1e-3), st.floats(-2, 2))


def test_halfspace_and_box_basics():
    c = HalfspaceConstraint([1.0, 0.0], 1.0)
    assert c.value([2.0, 5.0]) == 1.0 and c.holds([1.0, 0.0]) and not c.holds([0.9, 0.0])
    assert HalfspaceConstraint([0.0, 0.0], 1.0).degenerate
    with pytest.raises(ValueError):
        HalfspaceConstraint([np.inf, 0.0], 0.0)
    with pytest.raises(ValueError):
        ControlBox((1.0, 0.0), (0.0, 1.0))
    assert np.allclose(BOX.clip([5.0, -4.0]), [3.0, -3.0])
    rows = BOX.as_halfspaces()
    assert all(r.holds([0.0, 0.0]) for r in rows) and not all(r.holds([3.5, 0.0]) for r in rows)


def test_single_constraint_closed_form():
    res = F.qp_filter([0.0, 0.0], [HalfspaceConstraint([1.0, 0.0], 1.0)])
    assert np.allclose(res.u_out, [1.0, 0.0]) and res.modified and res.solver == "closed_form"
    assert res.multipliers == pytest.approx((1.0,))


def test_passthrough_when_satisfied():
    u = np.array([0.5, -0.2])
    res = F.qp_filter(u, [HalfspaceConstraint([1.0, 0.0], 0.0)], BOX)
    assert not res.modified and np.array_equal(res.u_out, u) and res.cost == 0.0


def test_box_clips_projection():
    res = F.qp_filter([0.0, 0.0], [HalfspaceConstraint([1.0, 1.0], 5.0)], BOX)
    assert np.allclose(res.u_out, [2.5, 2.5])
    res = F.qp_filter([0.0, -3.0], [HalfspaceConstraint([1.0, 0.2], 3.0)], BOX)
    assert res.feasible and BOX.contains(res.u_out, 1e-9)
    assert res.u_out[0] <= 3.0 + 1e-9 and HalfspaceConstraint([1.0, 0.2], 3.0).holds(res.u_out, 1e-9)


def test_infeasible_falls_back_to_least_violation():
    cons = [HalfspaceConstraint([1.0, 0.0], 1.0), HalfspaceConstraint([-1.0, 0.0], 1.0)]
    res = F.qp_filter([0.0, 0.0], cons)
    assert not res.feasible and math.isinf(res.cost)
    # equal violations of u1 >= 1 and u1 <= -1 balance at u1 = 0
    assert abs(res.u_out[0]) < 1e-5
    res = F.qp_filter([0.0, 0.0], [HalfspaceConstraint([0.0, 0.0], 1.0), HalfspaceConstraint([1.0, 0.0], 1.0)])
    assert not res.feasible and res.unsatisfiable == (0,)


def test_degenerate_satisfied_row_is_ignored():
    cons = [HalfspaceConstraint([0.0, 0.0], -1.0), HalfspaceConstraint([1.0, 0.0], 1.0)]
    res = F.qp_filter([0.0, 0.0], cons, BOX)
    assert res.feasible and np.allclose(res.u_out, [1.0, 0.0])


def test_empty_constraint_list_rejected():
    with pytest.raises(F.FilterError):
        F.qp_filter([0.0, 0.0], [])


@given(vec2, st.lists(constraint, min_size=1, max_size=6))
def test_qp_kkt_and_idempotence(u_ref, cons):
    res = F.qp_filter(u_ref, cons, BOX)
    if not res.feasible:
        return
    assert F.kkt_residual(res, cons, BOX) < 1e-6
    assert all(c.holds(res.u_out, 1e-8) for c in cons) and BOX.contains(res.u_out, 1e-8)
    again = F.qp_filter(res.u_out, cons, BOX)
    assert np.allclose(again.u_out, res.u_out, atol=1e-9)
    assert again.cost < 1e-16


@given(vec2, st.lists(constraint, min_size=1, max_size=4))
def test_qp_not_beaten_by_grid(u_ref, cons):
    res = F.qp_filter(u_ref, cons, BOX)
    g = grid_optimum(u_ref, cons, BOX, 60)
    if g is not None:
        assert res.feasible and res.cost <= g + 1e-9


def test_qp_grid_oracle():
    r = qp_grid_check(30)
    assert r.ok, r.detail


def test_majority_size():
    assert [F.majority_size(n) for n in (1, 2, 3, 4, 5, 7)] == [1, 2, 2, 3, 3, 4]


def test_miqp_hand_example():
    # u1 >= 1, u1 >= 2, u1 <= 0 from the origin: the only feasible pair is the first two
    cons = [HalfspaceConstraint([1.0, 0.0], 1.0), HalfspaceConstraint([1.0, 0.0], 2.0),
            HalfspaceConstraint([-1.0, 0.0], 0.0)]
    res = F.miqp_bruteforce([0.0, 0.0], cons)
    assert res.feasible and np.allclose(res.u_out, [2.0, 0.0]) and res.cost == pytest.approx(4.0)
    assert F.n_satisfied(cons, res.u_out) == 2


def test_miqp_passthrough_and_bounds():
    cons = [HalfspaceConstraint([1.0, 0.0], -1.0)] * 3
    res = F.miqp_bruteforce([0.0, 0.0], cons, BOX)
    assert not res.modified
    with pytest.raises(F.FilterError):
        F.miqp_bruteforce([0.0, 0.0], cons * 5)


@given(vec2, st.lists(constraint, min_size=1, max_size=7))
def test_heuristic_dominated_by_miqp(u_ref, cons):
    exact = F.miqp_bruteforce(u_ref, cons, BOX)
    heur = F.heuristic_from_constraints(u_ref, cons, BOX)
    assert heur.cost >= exact.cost - 1e-9
    if exact.feasible:
        assert F.n_satisfied(cons, exact.u_out, 1e-7) >= F.majority_size(len(cons))


# constraints with similar normals that all exclude the origin: the oracle optimum often satisfies every one
violated_at_origin = st.builds(lambda t, b: HalfspaceConstraint([math.cos(t), math.sin(t)], b),
                               st.floats(-0.6, 0.6), st.floats(0.1, 2.0))


@settings(suppress_health_check=[HealthCheck.filter_too_much])
@given(st.just(np.zeros(2)) | vec2, st.lists(violated_at_origin, min_size=3, max_size=7))
def test_heuristic_matches_miqp_when_optimum_satisfies_unsafe_voters(u_ref, cons):
    unsafe = [c for c in cons if c.value(u_ref) < 0]
    assume(len(unsafe) >= F.majority_size(len(cons)))
    exact = F.miqp_bruteforce(u_ref, cons, BOX)
    assume(exact.feasible and all(c.holds(exact.u_out, 1e-10) for c in unsafe))
    # the oracle point is feasible for the heuristic's QP, so the heuristic cannot cost more
    heur = F.heuristic_from_constraints(u_ref, cons, BOX)
    assert heur.cost == pytest.approx(exact.cost, rel=1e-7, abs=1e-9)


def test_heuristic_all_unsafe_is_plain_qp():
    cons = [HalfspaceConstraint([1.0, 0.0], 1.0), HalfspaceConstraint([0.0, 1.0], 0.5),
            HalfspaceConstraint([1.0, 1.0], 2.0)]
    heur = F.heuristic_from_constraints([0.0, 0.0], cons, BOX)
    qp = F.qp_filter([0.0, 0.0], cons, BOX)
    assert np.allclose(heur.u_out, qp.u_out)


def test_miqp_dominance_suite():
    r = miqp_dominance_check(50)
    assert r.ok, r.detail


# ---------------------------------------------------------------------------
# Ensemble-driven filters


def _states(pool, rng):
    return [rng.standard_normal(m.encoder.state_dim) for m in pool]


def test_heuristic_filter_makes_unsafe_voters_safe(smoke_run, rng):
    ens = E.majority(smoke_run.pool)
    for _ in range(20):
        xs = _states(ens.members, rng)
        u = rng.uniform(-3, 3, 2)
        vote = E.vote_action(ens, xs, u)
        res = F.heuristic_filter(u, ens, xs, BOX)
        if vote.safe:
            assert not res.modified
            continue
        cons = E.member_constraints(ens, xs)
        if res.feasible:
            for i, c in enumerate(cons):
                if c.value(u) < 0:
                    assert c.holds(res.u_out, 1e-7)


def test_heuristic_filter_needs_majority(smoke_run, rng):
    with pytest.raises(F.FilterError):
        F.heuristic_filter([0.0, 0.0], E.uniform(smoke_run.pool), _states(smoke_run.pool, rng))


def test_averaging_filter_satisfies_combined_constraint(smoke_run, rng):
    ens = E.uniform([m for m in smoke_run.pool if m.method != "dh"])
    xs = _states(ens.members, rng)
    u = rng.uniform(-3, 3, 2)
    res = F.filter_control(u, ens, xs)
    assert E.ensemble_constraint(ens, xs).holds(res.u_out, 1e-9)


def test_consensus_filter_routes(smoke_run, rng):
    ens = E.consensus(smoke_run.pool)
    r = ens.roles
    agree_safe = agree_unsafe = disagree = 0
    for _ in range(60):
        xs = _states(ens.members, rng)
        u = rng.uniform(-3, 3, 2)
        s1 = E.member_constraint(ens.members[r.m1], xs[r.m1]).value(u) >= 0
        s2 = E.member_constraint(ens.members[r.m2], xs[r.m2]).value(u) >= 0
        before = ens.m3_calls
        res = F.consensus_filter(u, ens, xs, BOX)
        if s1 == s2:
            assert ens.m3_calls == before
            if s1:
                agree_safe += 1
                assert not res.modified
            else:
                agree_unsafe += 1
                k = E.decisive_member(ens)
                assert E.member_constraint(ens.members[k], xs[k]).holds(res.u_out, 1e-7) or not res.feasible
        else:
            disagree += 1
            assert ens.m3_calls == before + 1
    assert agree_safe + agree_unsafe + disagree == 60


def test_rollout_filtered_smoke(smoke_run):
    from safeens.sim import regime_config

    cfg = smoke_run.config
    world = regime_config(cfg.world, 0)
    seeds = F.crash_prone_seeds(world, 3, start=cfg.rollout_seed_start)
    base = F.rollout_filtered(world, "nominal", None, seeds)
    assert base.collision_rate == 1.0 and base.intervention_rate == 0.0
    ens = E.majority(smoke_run.pool)
    rep = F.rollout_filtered(world, "nominal", ens, seeds, cfg.families)
    again = F.rollout_filtered(world, "nominal", ens, seeds, cfg.families)
    assert rep.rows == again.rows
    assert 0 <= rep.collision_rate <= 1 and rep.summary()["n_seeds"] == 3
    assert rep.to_csv().splitlines()[0] == "seed,collision,steps,interventions,intervention_rate,mean_deviation"


def test_filter_agent_checks_families(smoke_run):
    with pytest.raises(F.FilterError):
        F.FilterAgent(E.majority(smoke_run.pool), smoke_run.config.world, {"A": smoke_run.config.families["A"]})
