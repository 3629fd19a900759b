from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safeens import ensemble as E
from safeens.ensemble import ABSTAIN, SAFE, UNSAFE, Ensemble, EnsembleError, Vote
from safeens.train import MemberOutputs


def _fake(i, **val):
    return SimpleNamespace(member_id=f"m{i}", val_metrics=val, method="idbf", family="A")


def _outputs(rates, safe, ids=None):
    n = len(safe)
    ids = ids or [f"m{i}" for i in range(len(rates))]
    return {mid: MemberOutputs(mid, True, None, np.column_stack([np.ones(n), np.zeros(n)]), -np.asarray(r),
                               np.zeros((n, 2)), np.ones(n, bool), np.asarray(safe, bool))
            for mid, r in zip(ids, rates)}


def test_vote_rules():
    assert Vote([SAFE, SAFE, UNSAFE]).safe
    assert not Vote([SAFE, UNSAFE]).safe  # ties are unsafe
    assert Vote([SAFE, ABSTAIN, ABSTAIN]).safe
    assert Vote([SAFE, UNSAFE, ABSTAIN]).tally == (1, 1)
    with pytest.raises(EnsembleError):
        Vote([ABSTAIN, ABSTAIN]).verdict


def test_ensemble_validation():
    ms = [_fake(i) for i in range(3)]
    with pytest.raises(EnsembleError):
        Ensemble(ms, "bogus")
    with pytest.raises(EnsembleError):
        Ensemble([], "majority_vote")
    with pytest.raises(EnsembleError):
        Ensemble(ms, "weighted_avg", weights=np.array([0.5, 0.6, -0.1]))
    with pytest.raises(EnsembleError):
        Ensemble(ms, "majority_vote", weights=np.ones(3) / 3)
    with pytest.raises(EnsembleError):
        Ensemble(ms, "consensus")
    assert np.allclose(E.uniform(ms).weights, 1 / 3)


@given(arrays(float, (40, 4), elements=st.floats(-3, 3)), arrays(bool, 40))
def test_majority_verdicts_match_manual_count(rates, safe):
    ens = E.majority([_fake(i) for i in range(4)])
    out = _outputs(list(rates.T), safe)
    got = E.action_verdicts(ens, out)
    n_safe = (rates >= 0).sum(axis=1)
    assert np.array_equal(got, n_safe > 4 - n_safe)


@given(arrays(float, (30, 3), elements=st.floats(-3, 3)), arrays(float, 3, elements=st.floats(0.01, 1)))
def test_averaging_verdicts_match_weighted_sum(rates, w):
    w = w / w.sum()
    ens = Ensemble([_fake(i) for i in range(3)], "weighted_avg", weights=w)
    out = _outputs(list(rates.T), np.ones(30, bool))
    assert np.array_equal(E.action_verdicts(ens, out), rates @ w >= 0)


def test_consensus_counters_and_routing():
    ms = [_fake(0, safe_action_acc=90, unsafe_action_acc=10), _fake(1, safe_action_acc=50, unsafe_action_acc=52),
          _fake(2, safe_action_acc=60, unsafe_action_acc=61), _fake(3, safe_action_acc=20, unsafe_action_acc=95)]
    ens = E.consensus(ms)
    assert (ens.roles.m1, ens.roles.m2) == (2, 1)  # most balanced first
    rates = np.array([[1, 1, 1, -1], [1, -1, 1, -1], [-1, -1, -1, 1], [-1, 1, -1, -1]], dtype=float)
    out = _outputs(list(rates.T), np.ones(4, bool))
    v = E.action_verdicts(ens, out)
    # rows 0 and 2: m1, m2 agree; rows 1 and 3 disagree and go to the majority of all four (2-2 tie is unsafe)
    assert list(v) == [True, False, False, False]
    assert (ens.queries, ens.m3_calls) == (4, 2)
    assert ens.m3_call_rate == 0.5


def test_role_assignment():
    ms = [_fake(0, safe_action_acc=99, unsafe_action_acc=10), _fake(1, safe_action_acc=40, unsafe_action_acc=97),
          _fake(2, safe_action_acc=70, unsafe_action_acc=71), _fake(3, safe_action_acc=30, unsafe_action_acc=99)]
    special = E.assign_consensus_roles(ms, mode="specialized")
    assert (special.m1, special.m2) == (0, 3)
    non = E.assign_consensus_roles(ms, mode="non_specialized")
    assert non.m1 == 2 and non.m2 == 1
    with pytest.raises(EnsembleError):
        E.assign_consensus_roles(ms[:2])
    with pytest.raises(EnsembleError):
        E.assign_consensus_roles(ms, mode="other")


def test_decisive_member_tie_goes_to_lower_index():
    ms = [_fake(i, safe_action_acc=50, unsafe_action_acc=50) for i in range(3)]
    ens = E.consensus(ms)
    assert E.decisive_member(ens) == min(ens.roles.m1, ens.roles.m2)


def test_weight_training_prefers_accurate_member(rng):
    safe = rng.random(300) > 0.3
    good = np.where(safe, 1.0, -1.0) + 0.1 * rng.standard_normal(300)
    noise = [rng.standard_normal(300) for _ in range(3)]
    ms = [_fake(i) for i in range(4)]
    ens = Ensemble(ms, "weighted_avg")
    outs = list(_outputs([noise[0], good, noise[1], noise[2]], safe).values())
    w = E.train_weights(ens, outputs=outs, epochs=300)
    assert abs(w.sum() - 1) < 1e-12 and np.all(w >= 0)
    assert int(np.argmax(w)) == 1 and w[1] > 0.5
    h = ens.loss_history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert h[-1] < h[0]


def test_weight_training_rejects_all_safe():
    ens = Ensemble([_fake(0), _fake(1)], "weighted_avg")
    outs = list(_outputs([np.ones(5), np.ones(5)], np.ones(5, bool)).values())
    with pytest.raises(EnsembleError):
        E.train_weights(ens, outputs=outs)
    with pytest.raises(EnsembleError):
        E.train_weights(E.majority([_fake(0)]), outputs=outs)


# ---------------------------------------------------------------------------
# Real members


def test_ensemble_constraint_is_weighted_sum(smoke_run, rng):
    members = [m for m in smoke_run.pool if m.method != "dh"][:3]
    w = np.array([0.2, 0.3, 0.5])
    ens = Ensemble(members, "weighted_avg", weights=w)
    xs = [rng.standard_normal(m.encoder.state_dim) for m in members]
    c = E.ensemble_constraint(ens, xs)
    for _ in range(5):
        u = rng.uniform(-3, 3, 2)
        assert c.value(u) == pytest.approx(sum(wi * E.member_constraint(m, x).value(u)
                                               for wi, m, x in zip(w, members, xs)))
    with pytest.raises(EnsembleError):
        E.ensemble_constraint(E.majority(members), xs)
    with pytest.raises(EnsembleError):
        E.member_constraints(ens, xs[:2])


def test_state_vote_abstentions(smoke_run, rng):
    dh = [m for m in smoke_run.pool if m.method == "dh"]
    cbf = [m for m in smoke_run.pool if m.method != "dh"][:1]
    xs = [rng.standard_normal(m.encoder.state_dim) for m in dh + cbf]
    vote = E.vote_state(E.majority(dh + cbf), xs)
    assert vote.verdicts[:len(dh)] == [ABSTAIN] * len(dh)
    with pytest.raises(EnsembleError):
        E.vote_state(E.majority(dh), xs[:len(dh)])


def test_dataset_verdicts_match_live_votes(smoke_run):
    """Dataset-level verdicts agree with voting member by member on encoded states."""
    data = smoke_run.splits.test
    ens = E.majority(smoke_run.pool)
    outs = E.outputs_by_id(ens.members, data)
    fast = E.action_verdicts(ens, outs)
    v = data.valid()
    states = [m.encode(data.embeddings(m.family), data.controls())[v] for m in ens.members]
    ctrl = data.controls()[v]
    for k in range(0, len(ctrl), 7):
        assert E.vote_action(ens, [s[k] for s in states], ctrl[k]).safe == fast[k]


def test_standard_ensemble_set(smoke_run):
    names = [e.name for e, _, _ in smoke_run.entries]
    assert len(names) == len(set(names)) == 39
    assert "consensus:specialized" in names and "majority_vote:all:A-B" in names
    for ens, methods, fams in smoke_run.entries:
        if ens.strategy == "weighted_avg":
            assert abs(ens.weights.sum() - 1) < 1e-9
        if methods not in ("all",):
            assert {m.method for m in ens.members} == set(methods.split("-"))
        assert {m.family for m in ens.members} == set(fams.split("-"))
    with pytest.raises(KeyError):
        E.find(smoke_run.entries, "nope")
