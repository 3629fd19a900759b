"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``CRITERION n: PASS|FAIL`` line with the numbers behind
it.  Criteria 4-9 share one set of five default-scale pipeline runs.
"""
from __future__ import annotations

import filecmp
import time

import numpy as np
import pytest

from safeens import cli
from safeens import ensemble as E
from safeens import pipeline as P
from safeens import verify as VF
from safeens.config import PipelineConfig
from safeens.metrics import class_accuracies

SEEDS = (0, 1, 2, 3, 4)


def report(capsys, n, ok, detail, soft=False):
    status = "PASS" if ok else "FAIL"
    if ok and soft:
        status = "PASS (soft)"
    with capsys.disabled():
        print(f"\nCRITERION {n}: {status}: {detail}", flush=True)


def balanced(pred, labels) -> float:
    a = class_accuracies(pred, labels)
    return 0.5 * (a["safe_acc"] + a["unsafe_acc"])


# ---------------------------------------------------------------------------
# 1-3: oracles


def test_criterion_1_gradients(capsys):
    res = VF.gradient_checks(n_points=20, tol=1e-4)
    ok = all(r.ok for r in res) and all(r.n_points >= 20 for r in res)
    detail = ", ".join(f"{r.name} {r.worst:.1e}" for r in res)
    report(capsys, 1, ok, f"worst relative error over 20 points (tol 1e-4): {detail}")
    assert ok


def test_criterion_2_qp_grid(capsys):
    r = VF.qp_grid_check(n=100, grid=400)
    report(capsys, 2, r.ok, r.detail)
    assert r.ok


def test_criterion_3_miqp_dominance(capsys):
    r = VF.miqp_dominance_check(n=200)
    report(capsys, 3, r.ok, r.detail)
    assert r.ok


# ---------------------------------------------------------------------------
# 4-9: five default-scale pipeline seeds


@pytest.fixture(scope="session")
def runs():
    out = {}
    for s in SEEDS:
        t0 = time.time()
        out[s] = P.run_pipeline(PipelineConfig(seed=s))
        print(f"pipeline seed {s}: {len(out[s].data)} trajectories, {len(out[s].pool)} members, "
              f"{time.time() - t0:.0f}s")
    return out


def _rows(run, **match):
    return [r for r in run.comparison if all(r.get(k) == v for k, v in match.items())]


def _one(run, **match):
    rows = _rows(run, **match)
    assert len(rows) == 1, match
    return rows[0]


def _cell_gap(run, strategy):
    """Mean over (method, family) cells of ensemble minus mean-member balanced action accuracy."""
    test = run.splits.test
    outputs = E.outputs_by_id(run.pool, test)
    labels = next(iter(outputs.values())).control_safe
    ens_acc, mem_acc = [], []
    for ens, methods, fams in run.entries:
        if ens.strategy != strategy or "-" in methods or "-" in fams or methods == "all":
            continue
        ens_acc.append(balanced(E.action_verdicts(ens, outputs), labels))
        mem_acc.append(np.mean([balanced(outputs[m.member_id].action_verdicts(), labels) for m in ens.members]))
    return float(np.mean(ens_acc)), float(np.mean(mem_acc))


@pytest.mark.slow
def test_criterion_4_ensemble_improvement(runs, capsys):
    parts, ok = [], True
    for strategy in ("majority_vote", "weighted_avg"):
        gaps = [_cell_gap(runs[s], strategy) for s in SEEDS]
        ens_mean = np.mean([g[0] for g in gaps])
        mem_mean = np.mean([g[1] for g in gaps])
        wins = sum(g[0] > g[1] for g in gaps)
        good = ens_mean >= mem_mean - 1.0 and wins >= 4
        ok &= good
        parts.append(f"{strategy} ensemble {ens_mean:.2f} vs members {mem_mean:.2f}, "
                     f"per-seed gap {[round(g[0] - g[1], 2) for g in gaps]}, better in {wins}/5")
    report(capsys, 4, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_5_diversity(runs, capsys):
    parts, ok, soft = [], True, False
    for method in ("idbf", "sablas"):
        for strategy in ("majority_vote", "uniform_avg"):
            margins = []
            for s in SEEDS:
                e = {f: _one(runs[s], section="ensemble", aggregation=strategy, methods=method,
                             families=f)["eir_actions"] for f in ("A", "B", "A-B")}
                margins.append(e["A-B"] - max(e["A"], e["B"]))
            bad = sum(m <= 0 for m in margins)
            ok &= bad <= 1
            soft |= bad == 1
            parts.append(f"{method}/{strategy} two-family margin {[round(m, 3) for m in margins]}")
    report(capsys, 5, ok, "; ".join(parts), soft=soft)
    assert ok


@pytest.mark.slow
def test_criterion_6_ind_ood(runs, capsys):
    parts, ok = [], True
    for method in ("idbf", "sablas"):
        for strategy in ("uniform_avg", "majority_vote"):
            for task in ("eir_states", "eir_actions"):
                vals = {sp: np.mean([next(r[task] for r in runs[s].ind_ood if r["methods"] == method and
                                          r["aggregation"] == strategy and r["split"] == sp) for s in SEEDS])
                        for sp in ("ind", "ood")}
                good = vals["ind"] > 0 and vals["ood"] > 0 and vals["ood"] <= vals["ind"] + 0.02
                ok &= bool(good)
                parts.append(f"{method}/{strategy}/{task[4:]} IND {vals['ind']:.3f} OOD {vals['ood']:.3f}"
                             + ("" if good else " <- violates"))
    report(capsys, 6, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_7_dh_skew(runs, capsys):
    per_seed = []
    for s in SEEDS:
        rows = _rows(runs[s], section="member", methods="dh")
        per_seed.append((float(np.mean([r["safe_action_acc"] for r in rows])),
                         float(np.mean([r["unsafe_action_acc"] for r in rows]))))
    safe = float(np.mean([p[0] for p in per_seed]))
    unsafe = float(np.mean([p[1] for p in per_seed]))
    ok = unsafe > safe
    report(capsys, 7, ok, f"DH members safe-action {safe:.1f} vs unsafe-action {unsafe:.1f}; per seed "
                          f"{[(round(a, 1), round(b, 1)) for a, b in per_seed]}")
    assert ok


@pytest.mark.slow
def test_criterion_8_closed_loop(runs, capsys):
    run = runs[SEEDS[0]]
    filtered, baseline = P.rollout(run.config, P.rollout_ensemble(run.entries), 200)
    ok = filtered.collision_rate <= 0.5 * baseline.collision_rate
    report(capsys, 8, ok, f"200 crash-prone seeds: filtered collision rate {filtered.collision_rate:.3f} vs "
                          f"unfiltered {baseline.collision_rate:.3f}; intervention rate "
                          f"{filtered.intervention_rate:.3f}; mean control deviation {filtered.mean_deviation:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_9_consensus(runs, capsys):
    rates = {"specialized": [], "non_specialized": []}
    acc_gap = []
    for s in SEEDS:
        run = runs[s]
        outputs = E.outputs_by_id(run.pool, run.splits.test)
        labels = next(iter(outputs.values())).control_safe
        m3 = balanced(E.action_verdicts(E.majority(run.pool), outputs), labels)
        for mode in rates:
            ens = E.find(run.entries, f"consensus:{mode}")
            ens.reset_counters()
            acc = balanced(E.action_verdicts(ens, outputs), labels)
            rates[mode].append(ens.m3_call_rate)
            if mode == "non_specialized":
                acc_gap.append(acc - m3)
    special, non = float(np.mean(rates["specialized"])), float(np.mean(rates["non_specialized"]))
    gap = float(np.mean(acc_gap))
    ok = non < special and abs(gap) <= 3.0
    report(capsys, 9, ok, f"M3 call rate non-specialized {non:.3f} vs specialized {special:.3f} "
                          f"(per seed {[round(a, 3) for a in rates['non_specialized']]} vs "
                          f"{[round(a, 3) for a in rates['specialized']]}); balanced accuracy minus M3-always "
                          f"{gap:+.2f} points (per seed {[round(g, 2) for g in acc_gap]})")
    assert ok


# ---------------------------------------------------------------------------
# 10: determinism


def _smoke(out):
    for stage in ("gen-data", "train", "build-ensembles", "eval", "rollout"):
        assert cli.main([stage, "--preset", "smoke", "--out", str(out)]) == cli.EXIT_OK


def test_criterion_10_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    _smoke(a)
    _smoke(b)
    files = sorted(str(p.relative_to(a)) for p in a.rglob("*")
                   if p.is_file() and p.name != ".lock" and p.parent.name != "stages" and p.name != "config.yaml")
    files += sorted(str(p.relative_to(a)) for p in (a / "stages").glob("*.json"))
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    need = {"dataset/manifest.json", "dataset/trajectories.jsonl", "reports/comparison.csv", "reports/ind_ood.csv",
            "reports/rollout.csv"}
    n_models = sum(f.startswith("models/") for f in files)
    ok = not mismatch and not errors and need <= set(files) and n_models > 0
    report(capsys, 10, ok, f"{len(files)} artifacts compared byte for byte ({n_models} model files), "
                           f"mismatched {mismatch + errors}")
    assert ok
