"""On-disk formats: JSON-lines datasets, JSON model bundles, pool manifests, ensemble descriptors.

Every artifact carries ``format_version`` and the ``config_hash`` of the run that
produced it; loaders refuse mismatches.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import ensemble as E
from .sim import LabeledDataset, LabeledTrajectory, RawFrame, count_labels
from .train import model_from_dict, model_to_dict

FORMAT_VERSION = 1
DATASET_FILE = "trajectories.jsonl"
MANIFEST_FILE = "manifest.json"


class ArtifactError(RuntimeError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"shape": list(a.shape), "dtype": "<f4", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d.get("dtype", "<f4")).reshape(d["shape"]).astype(np.float32)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def write_text(path: Path, text: str):
    """Write via a temp file and rename so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_stamp(d: dict, config_hash: str | None, what: str):
    if d.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"{what}: format version {d.get('format_version')} != {FORMAT_VERSION}")
    if config_hash is not None and d.get("config_hash") != config_hash:
        raise ArtifactError(f"{what}: built with config {d.get('config_hash')}, current config is {config_hash}")


# ---------------------------------------------------------------------------
# Datasets


def trajectory_to_dict(t: LabeledTrajectory) -> dict:
    return {
        "key": t.key,
        "regime_id": t.regime_id,
        "seed": t.seed,
        "policy": t.policy,
        "had_collision": t.had_collision,
        "collision_index": t.collision_index,
        "frames": [f.to_dict() for f in t.frames],
        "embeddings": {k: encode_array(v) for k, v in sorted(t.embeddings.items())},
        "state_safe": [bool(v) for v in t.state_safe],
        "control_safe": [bool(v) for v in t.control_safe],
    }


def trajectory_from_dict(d: dict) -> LabeledTrajectory:
    return LabeledTrajectory(
        [RawFrame.from_dict(f) for f in d["frames"]], bool(d["had_collision"]), d["collision_index"],
        int(d["regime_id"]), int(d["seed"]), d["policy"],
        {k: decode_array(v) for k, v in d["embeddings"].items()},
        state_safe=np.array(d["state_safe"], dtype=bool), control_safe=np.array(d["control_safe"], dtype=bool),
    )


def save_dataset(directory, data: LabeledDataset, config_hash: str, extra: dict | None = None) -> dict:
    directory = Path(directory)
    lines = "".join(json.dumps(trajectory_to_dict(t), sort_keys=True) + "\n" for t in data.trajectories)
    write_text(directory / DATASET_FILE, lines)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "n_trajectories": len(data),
        "label_counts": count_labels(data.trajectories),
        "trajectories_sha256": hashlib.sha256(lines.encode()).hexdigest(),
        "keys": [t.key for t in data.trajectories],
        **(extra or {}),
    }
    write_text(directory / MANIFEST_FILE, dump_json(manifest))
    return manifest


def load_dataset(directory, config_hash: str | None = None) -> LabeledDataset:
    directory = Path(directory)
    mpath = directory / MANIFEST_FILE
    if not mpath.exists():
        raise FileNotFoundError(f"no dataset manifest in {directory}")
    manifest = json.loads(mpath.read_text())
    check_stamp(manifest, config_hash, "dataset")
    if file_sha256(directory / DATASET_FILE) != manifest["trajectories_sha256"]:
        raise ArtifactError("dataset file does not match its manifest checksum")
    with open(directory / DATASET_FILE) as fh:
        trajs = [trajectory_from_dict(json.loads(line)) for line in fh if line.strip()]
    return LabeledDataset(trajs, count_labels(trajs))


# ---------------------------------------------------------------------------
# Models and pools


def save_model(path, model, config_hash: str):
    d = {"format_version": FORMAT_VERSION, "config_hash": config_hash, "model": model_to_dict(model)}
    write_text(Path(path), dump_json(d))


def load_model(path, config_hash: str | None = None):
    d = json.loads(Path(path).read_text())
    check_stamp(d, config_hash, f"model {path}")
    return model_from_dict(d["model"])


def save_pool(directory, pool, large, config_hash: str) -> dict:
    directory = Path(directory)
    entries = []
    for m in list(pool) + list(large):
        fname = f"{m.member_id}.json"
        save_model(directory / fname, m, config_hash)
        entries.append({"member_id": m.member_id, "file": fname, "method": m.method, "family": m.family,
                        "geometry": m.geometry, "large": any(m is x for x in large)})
    manifest = {"format_version": FORMAT_VERSION, "config_hash": config_hash, "members": entries}
    write_text(directory / "pool.json", dump_json(manifest))
    return manifest


def load_pool(directory, config_hash: str | None = None):
    directory = Path(directory)
    mpath = directory / "pool.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no pool manifest in {directory}")
    manifest = json.loads(mpath.read_text())
    check_stamp(manifest, config_hash, "pool")
    pool, large = [], []
    for e in manifest["members"]:
        (large if e["large"] else pool).append(load_model(directory / e["file"], config_hash))
    return pool, large


# ---------------------------------------------------------------------------
# Ensembles


def save_ensembles(path, entries, config_hash: str):
    """``entries``: list of (Ensemble, methods label, families label)."""
    out = []
    for ens, methods, families in entries:
        d = ens.describe()
        d.update(methods=methods, families=families)
        out.append(d)
    write_text(Path(path), dump_json({"format_version": FORMAT_VERSION, "config_hash": config_hash,
                                      "ensembles": out}))


def load_ensembles(path, pool, config_hash: str | None = None):
    d = json.loads(Path(path).read_text())
    check_stamp(d, config_hash, "ensembles")
    by_id = {m.member_id: m for m in pool}
    entries = []
    for e in d["ensembles"]:
        try:
            members = [by_id[i] for i in e["members"]]
        except KeyError as err:
            raise ArtifactError(f"ensemble {e['name']!r} references unknown member {err}") from None
        roles = None
        if e["roles"] is not None:
            r = e["roles"]
            m3 = E.majority([by_id[i] for i in r["m3"]["members"]], name="m3")
            roles = E.ConsensusRoles(r["m1"], r["m2"], m3, r["mode"])
        ens = E.Ensemble(members, e["strategy"], None if e["weights"] is None else np.array(e["weights"]),
                         roles, e["name"])
        entries.append((ens, e["methods"], e["families"]))
    return entries
