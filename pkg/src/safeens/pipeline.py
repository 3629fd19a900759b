"""In-memory pipeline stages shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import ensemble as E
from . import evaluation as V
from .config import PipelineConfig
from .filtering import RolloutReport, crash_prone_seeds, rollout_filtered
from .sim import LabeledDataset, generate_dataset, regime_config, split_ind_ood, split_train_val_test
from .train import train_member_pool

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    ood: LabeledDataset


def generate(cfg: PipelineConfig) -> LabeledDataset:
    regimes = sorted(set(cfg.ind_regimes) | set(cfg.ood_regimes))
    return generate_dataset(cfg.world, regimes, cfg.per_regime, cfg.families, seed=cfg.seed,
                            avoiding_fraction=cfg.avoiding_fraction)


def split(cfg: PipelineConfig, data: LabeledDataset) -> Splits:
    ind, ood = split_ind_ood(data, set(cfg.ind_regimes), set(cfg.ood_regimes))
    train, val, test = split_train_val_test(ind)
    return Splits(train, val, test, ood)


def _has_both_control_labels(data: LabeledDataset) -> bool:
    if not len(data):
        return False
    cs = data.control_safe()[data.valid()]
    return bool(cs.any() and (~cs).any())


def train(cfg: PipelineConfig, splits: Splits, progress=None):
    """Member pool plus the large single models."""
    val = splits.val if len(splits.val) else None
    families = sorted(cfg.families)
    pool = train_member_pool(splits.train, cfg.methods, families, cfg.n_per_cell, "member", cfg.train,
                             cfg.world.dt, val, pool_seed=cfg.seed, progress=progress)
    large = []
    for geometry in cfg.large_geometries:
        large += train_member_pool(splits.train, (cfg.large_method,), families[:1], 1, geometry, cfg.train,
                                   cfg.world.dt, val, pool_seed=cfg.seed, progress=progress)
    return pool, large


def weight_split(splits: Splits) -> LabeledDataset:
    """Weights are fitted on held-out validation data when it has both control labels."""
    return splits.val if _has_both_control_labels(splits.val) else splits.train


def build_ensembles(cfg: PipelineConfig, pool, splits: Splits):
    wout = E.outputs_by_id(pool, weight_split(splits))
    return E.standard_ensembles(pool, wout, lam=cfg.lam, weight_epochs=cfg.weight_epochs, weight_lr=cfg.weight_lr)


def evaluate(cfg: PipelineConfig, pool, large, entries, splits: Splits):
    comparison = V.run_comparison_suite(pool, splits.test, entries, large=large, lam=cfg.lam)
    ind_ood = V.run_ind_ood(pool, splits.test, splits.ood, lam=cfg.lam)
    return comparison, ind_ood


def rollout_ensemble(entries) -> E.Ensemble:
    return next(ens for ens, m, _ in entries if ens.strategy == "majority_vote" and m == "all")


def rollout(cfg: PipelineConfig, ens: E.Ensemble, n_seeds: int | None = None):
    """Filtered and unfiltered nominal rollouts over the same crash-prone seeds."""
    world = regime_config(cfg.world, cfg.rollout_regime)
    seeds = crash_prone_seeds(world, n_seeds or cfg.rollout_seeds, start=cfg.rollout_seed_start)
    filtered = rollout_filtered(world, "nominal", ens, seeds, cfg.families)
    baseline = rollout_filtered(world, "nominal", None, seeds, cfg.families)
    return filtered, baseline


@dataclass
class PipelineResult:
    config: PipelineConfig
    data: LabeledDataset
    splits: Splits
    pool: list
    large: list
    entries: list
    comparison: list = field(default_factory=list)
    ind_ood: list = field(default_factory=list)


def run_pipeline(cfg: PipelineConfig, with_eval: bool = True, progress=None) -> PipelineResult:
    data = generate(cfg)
    splits = split(cfg, data)
    pool, large = train(cfg, splits, progress)
    entries = build_ensembles(cfg, pool, splits)
    res = PipelineResult(cfg, data, splits, pool, large, entries)
    if with_eval:
        res.comparison, res.ind_ood = evaluate(cfg, pool, large, entries, splits)
    return res
