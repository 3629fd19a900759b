"""Command-line entry point: staged pipeline over one output directory.

Layout under the output directory::

    config.yaml               the resolved config of the run
    stages/<stage>.json       completion stamps (config hash, produced files)
    dataset/                  trajectories.jsonl + manifest.json
    models/                   one JSON bundle per member + pool.json
    ensembles/ensembles.json  ensemble descriptors with fitted weights
    reports/                  comparison.csv, ind_ood.csv, eval.json, rollout.json, rollout.csv

Exit codes: 0 success, 1 usage error, 2 invariant-suite failure, 3 stage-order or
config-hash mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import ensemble as E
from . import evaluation as V
from . import io as sio
from . import pipeline as P
from .config import PRESETS, ConfigError, PipelineConfig, load_config

log = logging.getLogger("safeens")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_STAGE = 0, 1, 2, 3
STAGES = ("gen-data", "train", "build-ensembles", "eval", "rollout")
REQUIRES = {"train": "gen-data", "build-ensembles": "train", "eval": "build-ensembles",
            "rollout": "build-ensembles"}
OUTPUT_ENV = "SAFEENS_OUTPUT"


class StageError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Run directory


class RunDir:
    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = cfg.hash

    dataset = property(lambda self: self.root / "dataset")
    models = property(lambda self: self.root / "models")
    ensembles = property(lambda self: self.root / "ensembles" / "ensembles.json")
    reports = property(lambda self: self.root / "reports")

    def stamp_path(self, stage):
        return self.root / "stages" / f"{stage}.json"

    def stamp(self, stage):
        p = self.stamp_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def check_config(self):
        """Refuse to mix artifacts from different configs in one directory."""
        p = self.root / "config.yaml"
        if p.exists():
            old = PipelineConfig.from_yaml(p.read_text())
            if old.hash != self.hash:
                raise StageError(f"{self.root} holds a run with config {old.hash}, current config is {self.hash}; "
                                 f"use another --out or --force")

    def write_config(self):
        sio.write_text(self.root / "config.yaml", self.cfg.to_yaml())

    def require(self, stage):
        need = REQUIRES.get(stage)
        if need is None:
            return
        st = self.stamp(need)
        if st is None:
            raise StageError(f"{stage} needs {need} to have run first in {self.root}")
        if st["config_hash"] != self.hash:
            raise StageError(f"{need} output was built with config {st['config_hash']}, current config is {self.hash}")

    def done(self, stage) -> bool:
        st = self.stamp(stage)
        return st is not None and st["config_hash"] == self.hash

    def mark(self, stage, files):
        d = {"format_version": sio.FORMAT_VERSION, "config_hash": self.hash, "stage": stage,
             "files": {str(Path(f).relative_to(self.root)): sio.file_sha256(f) for f in sorted(map(str, files))}}
        sio.write_text(self.stamp_path(stage), sio.dump_json(d))

    def invalidate_after(self, stage):
        """A forced stage makes every downstream stamp stale."""
        for s in STAGES[STAGES.index(stage) + 1:]:
            self.stamp_path(s).unlink(missing_ok=True)


def _splits(run: RunDir) -> P.Splits:
    return P.split(run.cfg, sio.load_dataset(run.dataset, run.hash))


# ---------------------------------------------------------------------------
# Stages


def cmd_gen_data(run: RunDir):
    data = P.generate(run.cfg)
    man = sio.save_dataset(run.dataset, data, run.hash)
    log.info("dataset: %d trajectories, labels %s", man["n_trajectories"], man["label_counts"])
    return [run.dataset / sio.DATASET_FILE, run.dataset / sio.MANIFEST_FILE]


def cmd_train(run: RunDir):
    splits = _splits(run)

    def progress(m):
        log.info("trained %s (val %s)", m.member_id,
                 ", ".join(f"{k} {v:.1f}" for k, v in sorted((m.val_metrics or {}).items())))

    pool, large = P.train(run.cfg, splits, progress)
    sio.save_pool(run.models, pool, large, run.hash)
    return sorted(run.models.glob("*.json"))


def cmd_build_ensembles(run: RunDir):
    splits = _splits(run)
    pool, _ = sio.load_pool(run.models, run.hash)
    entries = P.build_ensembles(run.cfg, pool, splits)
    sio.save_ensembles(run.ensembles, entries, run.hash)
    log.info("built %d ensembles", len(entries))
    return [run.ensembles]


def cmd_eval(run: RunDir):
    splits = _splits(run)
    pool, large = sio.load_pool(run.models, run.hash)
    entries = sio.load_ensembles(run.ensembles, pool, run.hash)
    comparison, ind_ood = P.evaluate(run.cfg, pool, large, entries, splits)
    t_cmp = run.reports / "comparison.csv"
    t_io = run.reports / "ind_ood.csv"
    js = run.reports / "eval.json"
    sio.write_text(t_cmp, V.write_csv(comparison, V.COMPARISON_COLUMNS))
    sio.write_text(t_io, V.write_csv(ind_ood, V.IND_OOD_COLUMNS))
    sio.write_text(js, sio.dump_json({"format_version": sio.FORMAT_VERSION, "config_hash": run.hash,
                                      "comparison": comparison, "ind_ood": ind_ood}))
    return [t_cmp, t_io, js]


def cmd_rollout(run: RunDir, ensemble: str | None = None, n_seeds: int | None = None):
    pool, _ = sio.load_pool(run.models, run.hash)
    entries = sio.load_ensembles(run.ensembles, pool, run.hash)
    try:
        ens = P.rollout_ensemble(entries) if ensemble is None else E.find(entries, ensemble)
    except KeyError:
        raise UsageError(f"no ensemble named {ensemble!r}; see {run.ensembles}") from None
    filtered, baseline = P.rollout(run.cfg, ens, n_seeds)
    out = {"format_version": sio.FORMAT_VERSION, "config_hash": run.hash, "ensemble": ens.name,
           "filtered": json.loads(filtered.to_json()), "unfiltered": json.loads(baseline.to_json())}
    js, csv = run.reports / "rollout.json", run.reports / "rollout.csv"
    sio.write_text(js, sio.dump_json(out))
    sio.write_text(csv, filtered.to_csv())
    s, b = filtered.summary(), baseline.summary()
    log.info("rollout %s: collision %.3f (unfiltered %.3f), intervention %.3f, deviation %.3f",
             ens.name, s["collision_rate"], b["collision_rate"], s["intervention_rate"], s["mean_deviation"])
    return [js, csv]


def cmd_verify(n_points: int = 20) -> int:
    from .verify import run_suite

    results = run_suite(n_points)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


# ---------------------------------------------------------------------------
# Argument handling


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safeens", description="Ensembles of learned safety filters.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", help="YAML config file")
        src.add_argument("--preset", choices=sorted(PRESETS), help="built-in config")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or the config's output_dir)")
        p.add_argument("--seed", type=int, help="override the config's global seed")
        p.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
        if name == "rollout":
            p.add_argument("--ensemble", help="ensemble name (default: majority vote over the whole pool)")
            p.add_argument("--seeds", type=int, help="number of crash-prone seeds")
    p = sub.add_parser("verify")
    p.add_argument("--points", type=int, default=20, help="finite-difference points per gradient check")
    p = sub.add_parser("show-config")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    return ap


def resolve_config(args) -> PipelineConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
    else:
        cfg = PRESETS[args.preset or "default"]()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    out = getattr(args, "out", None) or os.environ.get(OUTPUT_ENV)
    if out:
        cfg = cfg.replace(output_dir=out)
    return cfg


def run_stage(stage: str, cfg: PipelineConfig, force: bool = False, **kw) -> bool:
    """Run one stage under the directory lock.  Returns False when it was already up to date."""
    run = RunDir(cfg.output_dir, cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    fns = {"gen-data": cmd_gen_data, "train": cmd_train, "build-ensembles": cmd_build_ensembles,
           "eval": cmd_eval, "rollout": cmd_rollout}
    try:
        with FileLock(str(run.root / ".lock"), timeout=5):
            if not force:
                run.check_config()
            run.require(stage)
            if run.done(stage) and not force and not kw:
                log.info("%s is up to date for config %s", stage, run.hash)
                return False
            if force and stage == "gen-data":
                # a forced restart under a new config clears every stamp
                for s in STAGES:
                    run.stamp_path(s).unlink(missing_ok=True)
            run.write_config()
            run.invalidate_after(stage)
            files = fns[stage](run, **kw)
            run.mark(stage, files)
            return True
    except Timeout:
        raise StageError(f"{run.root} is locked by another process") from None


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.points)
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.to_yaml())
            print(f"# hash {cfg.hash}")
            return EXIT_OK
        kw = {}
        if args.command == "rollout":
            kw = {k: v for k, v in (("ensemble", args.ensemble), ("n_seeds", args.seeds)) if v is not None}
        run_stage(args.command, cfg, args.force, **kw)
        return EXIT_OK
    except (ConfigError, UsageError, E.EnsembleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, sio.ArtifactError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
