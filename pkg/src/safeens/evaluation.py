"""Accuracy and ensemble-improvement metrics, plus the comparison and IND/OOD harnesses."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ensemble as E
from .metrics import class_accuracies
from .sim import LabeledDataset
from .train import FilterModel, MemberOutputs, member_outputs

log = logging.getLogger(__name__)

LAMBDA_EIR = 18.0


class MetricError(ValueError):
    pass


def _outputs(subject, data, outputs):
    members = subject.members if isinstance(subject, E.Ensemble) else [subject]
    outputs = dict(outputs or {})
    for m in members:
        if m.member_id not in outputs:
            outputs[m.member_id] = member_outputs(m, data)
    return outputs


def classify_states(subject, data: LabeledDataset | None = None, outputs: dict | None = None):
    """Per-frame state verdicts (True = safe), or None when the subject cannot classify states."""
    outputs = _outputs(subject, data, outputs)
    if isinstance(subject, FilterModel):
        return outputs[subject.member_id].state_verdicts()
    return E.state_verdicts(subject, outputs)


def classify_actions(subject, data: LabeledDataset | None = None, outputs: dict | None = None):
    outputs = _outputs(subject, data, outputs)
    if isinstance(subject, FilterModel):
        return outputs[subject.member_id].action_verdicts()
    return E.action_verdicts(subject, outputs)


@dataclass
class AccuracyReport:
    subject: str
    safe_state_acc: float | None
    unsafe_state_acc: float | None
    safe_action_acc: float
    unsafe_action_acc: float
    counts: dict = field(default_factory=dict)
    split: str = "test"

    @property
    def balanced_action(self) -> float:
        return 0.5 * (self.safe_action_acc + self.unsafe_action_acc)

    def to_dict(self):
        return asdict(self)


def accuracy_report(subject, data: LabeledDataset | None = None, outputs: dict | None = None,
                    split: str = "test", name: str | None = None) -> AccuracyReport:
    outputs = _outputs(subject, data, outputs)
    first = next(iter(outputs[m.member_id] for m in
                      (subject.members if isinstance(subject, E.Ensemble) else [subject])))
    act = class_accuracies(classify_actions(subject, outputs=outputs), first.control_safe)
    sv = classify_states(subject, outputs=outputs)
    st = None if sv is None else class_accuracies(sv, first.state_safe)
    counts = {"action": {k: act[k] for k in ("n_safe", "n_unsafe", "correct_safe", "correct_unsafe")}}
    if st is not None:
        counts["state"] = {k: st[k] for k in ("n_safe", "n_unsafe", "correct_safe", "correct_unsafe")}
    if name is None:
        name = subject.member_id if isinstance(subject, FilterModel) else (subject.name or subject.strategy)
    return AccuracyReport(name, None if st is None else st["safe_acc"], None if st is None else st["unsafe_acc"],
                          act["safe_acc"], act["unsafe_acc"], counts, split)


# ---------------------------------------------------------------------------
# Ensemble improvement rate


@dataclass
class EirReport:
    task: str
    variant: str
    eir: float
    member_losses: list
    ensemble_loss: float
    lam: float = LAMBDA_EIR

    @property
    def mean_member_loss(self) -> float:
        return float(np.mean(self.member_losses))


def eir_value(member_losses, ensemble_loss) -> float:
    mean = float(np.mean(member_losses))
    if not mean > 0:
        raise MetricError("mean member loss is zero; improvement rate undefined")
    return (mean - float(ensemble_loss)) / mean


def hinge_risk(values, safe, lam: float = 1.0) -> float:
    """mean relu(-f) on safe + lam * mean relu(f) on unsafe, both averaged over all samples."""
    values = np.asarray(values, dtype=float)
    safe = np.asarray(safe, dtype=bool)
    n = len(values)
    return float((np.maximum(-values[safe], 0).sum() + lam * np.maximum(values[~safe], 0).sum()) / n)


def zero_one_risk(pred_safe, safe, lam: float = 1.0) -> float:
    pred_safe = np.asarray(pred_safe, dtype=bool)
    safe = np.asarray(safe, dtype=bool)
    return float(((pred_safe != safe) & safe).sum() + lam * ((pred_safe != safe) & ~safe).sum()) / len(safe)


def eir_averaging(members, weights=None, data: LabeledDataset | None = None, task: str = "actions",
                  lam: float = LAMBDA_EIR, outputs: dict | None = None) -> EirReport:
    members = list(members)
    w = np.full(len(members), 1.0 / len(members)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
        raise MetricError("weights must lie on the simplex")
    outputs = _outputs(E.Ensemble(members, "uniform_avg"), data, outputs)
    outs = [outputs[m.member_id] for m in members]
    if task == "states":
        if not all(o.is_cbf for o in outs):
            raise MetricError("the state task needs barrier members only")
        vals = [o.b for o in outs]
        labels = outs[0].state_safe
    elif task == "actions":
        vals = [o.rate for o in outs]
        labels = outs[0].control_safe
    else:
        raise MetricError(f"unknown task {task!r}")
    member_losses = [hinge_risk(v, labels, lam) for v in vals]
    ens_loss = hinge_risk(np.stack(vals, axis=1) @ w, labels, lam)
    return EirReport(task, "averaging", eir_value(member_losses, ens_loss), member_losses, ens_loss, lam)


def eir_zero_one(members, ens: E.Ensemble | None = None, data: LabeledDataset | None = None,
                 task: str = "actions", lam: float = LAMBDA_EIR, outputs: dict | None = None) -> EirReport:
    """Misclassification-rate EIR of a majority-vote ensemble.

    Unsafe errors are weighted by ``lam`` in both tasks; the state task only counts
    barrier members (hyperplane members abstain).
    """
    members = list(members)
    ens = ens or E.majority(members)
    if ens.strategy != "majority_vote":
        raise MetricError("zero-one improvement rate is defined for majority-vote ensembles")
    outputs = _outputs(ens, data, outputs)
    outs = [outputs[m.member_id] for m in members]
    if task == "states":
        voters = [o for o in outs if o.is_cbf]
        if not voters:
            raise MetricError("no member classifies states")
        labels = outs[0].state_safe
        member_losses = [zero_one_risk(o.state_verdicts(), labels, lam) for o in voters]
        ens_loss = zero_one_risk(E.state_verdicts(ens, outputs), labels, lam)
    elif task == "actions":
        labels = outs[0].control_safe
        member_losses = [zero_one_risk(o.action_verdicts(), labels, lam) for o in outs]
        ens_loss = zero_one_risk(E.action_verdicts(ens, outputs), labels, lam)
    else:
        raise MetricError(f"unknown task {task!r}")
    return EirReport(task, "zero_one", eir_value(member_losses, ens_loss), member_losses, ens_loss, lam)


def ensemble_eir(ens: E.Ensemble, outputs: dict, task: str, lam: float = LAMBDA_EIR) -> float | None:
    """EIR in the variant matching the ensemble's strategy; None when undefined."""
    try:
        if ens.strategy in E.AVERAGING:
            return eir_averaging(ens.members, ens.weights, task=task, lam=lam, outputs=outputs).eir
        if ens.strategy == "majority_vote":
            return eir_zero_one(ens.members, ens, task=task, lam=lam, outputs=outputs).eir
    except MetricError:
        return None
    return None


# ---------------------------------------------------------------------------
# Report tables

COMPARISON_COLUMNS = [
    "section", "aggregation", "methods", "families", "n_members",
    "safe_state_acc", "safe_state_std", "unsafe_state_acc", "unsafe_state_std", "eir_states",
    "safe_action_acc", "safe_action_std", "unsafe_action_acc", "unsafe_action_std", "eir_actions",
    "m3_call_rate",
]
IND_OOD_COLUMNS = ["methods", "aggregation", "variant", "split", "eir_states", "eir_actions"]


def write_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = {}
        for k, v in r.items():
            if v == "":
                out[k] = None
            else:
                try:
                    out[k] = int(v) if v.lstrip("-").isdigit() else float(v)
                except ValueError:
                    out[k] = v
        rows.append(out)
    return rows


def _mean_std(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def member_row(models, outputs, label_methods, label_families, section="member") -> dict:
    reps = [accuracy_report(m, outputs=outputs) for m in models]
    row = {"section": section, "aggregation": "-", "methods": label_methods, "families": label_families,
           "n_members": len(models)}
    for key in ("safe_state_acc", "unsafe_state_acc", "safe_action_acc", "unsafe_action_acc"):
        mean, std = _mean_std([getattr(r, key) for r in reps])
        row[key] = mean
        row[key.replace("_acc", "_std")] = std
    return row


def ensemble_row(ens: E.Ensemble, outputs, methods, families, lam=LAMBDA_EIR) -> dict:
    ens.reset_counters()
    rep = accuracy_report(ens, outputs=outputs)
    row = {"section": "ensemble", "aggregation": ens.strategy, "methods": methods, "families": families,
           "n_members": len(ens), "safe_state_acc": rep.safe_state_acc, "unsafe_state_acc": rep.unsafe_state_acc,
           "safe_action_acc": rep.safe_action_acc, "unsafe_action_acc": rep.unsafe_action_acc,
           "eir_states": ensemble_eir(ens, outputs, "states", lam),
           "eir_actions": ensemble_eir(ens, outputs, "actions", lam)}
    if ens.strategy == "consensus":
        row["m3_call_rate"] = ens.m3_call_rate
    return row


cell_members = E.cell_members
ordered_methods = E.ordered_methods


def run_comparison_suite(pool, data: LabeledDataset, entries=None, weight_data: LabeledDataset | None = None,
                         large=(), lam: float = LAMBDA_EIR, weight_epochs: int = 200, outputs=None) -> list[dict]:
    """Comparison of ensembles, member cells and large single models.

    ``entries`` are (ensemble, methods label, families label) triples; when
    omitted the standard set is built, with weights fitted on ``weight_data``.
    """
    pool = list(pool)
    outputs = _outputs(E.Ensemble(pool + list(large), "majority_vote"), data, outputs)
    if entries is None:
        wout = outputs if weight_data is None else _outputs(E.Ensemble(pool, "majority_vote"), weight_data, None)
        entries = E.standard_ensembles(pool, wout, lam=lam, weight_epochs=weight_epochs)
    rows = []
    for ens, methods, families in entries:
        row = ensemble_row(ens, outputs, methods, families, lam)
        if ens.strategy == "consensus":
            row["aggregation"] = f"consensus_{ens.roles.mode}"
        rows.append(row)
    for mth in ordered_methods(pool):
        for fam in sorted({m.family for m in pool}):
            members = cell_members(pool, (mth,), (fam,))
            if members:
                rows.append(member_row(members, outputs, mth, fam))
    for m in large:
        rows.append(member_row([m], outputs, m.method, m.family, section=m.geometry))
    return rows


def run_ind_ood(pool, ind_test: LabeledDataset, ood: LabeledDataset, lam: float = LAMBDA_EIR,
                methods=("idbf", "sablas")) -> list[dict]:
    """EIR of uniform-averaging and majority-vote ensembles on the IND test split and the OOD set."""
    rows = []
    for split, data in (("ind", ind_test), ("ood", ood)):
        outputs = _outputs(E.Ensemble(list(pool), "majority_vote"), data, None)
        for mth in methods:
            members = cell_members(pool, (mth,), {m.family for m in pool})
            if not members:
                continue
            for strategy in ("uniform_avg", "majority_vote"):
                ens = E.Ensemble(members, strategy)
                rows.append({"methods": mth, "aggregation": strategy,
                             "variant": "averaging" if strategy == "uniform_avg" else "zero_one", "split": split,
                             "eir_states": ensemble_eir(ens, outputs, "states", lam),
                             "eir_actions": ensemble_eir(ens, outputs, "actions", lam)})
    return rows
