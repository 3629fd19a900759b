"""Pipeline configuration: one YAML file describes a whole experiment."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .sim import REGIMES, WorldConfig
from .train import GEOMETRIES, METHODS, TrainConfig

FORMAT_VERSION = 1

DEFAULT_FAMILIES = {
    "A": {"embed_seed": 11, "rays_per_view": 8, "embed_dim": 24},
    "B": {"embed_seed": 29, "rays_per_view": 12, "embed_dim": 32},
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    families: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_FAMILIES.items()})
    methods: tuple = METHODS
    n_per_cell: int = 5
    large_geometries: tuple = ("large-deep", "large-wide")
    large_method: str = "idbf"
    per_regime: int = 45
    ind_regimes: tuple = (0, 1, 2, 3)
    ood_regimes: tuple = (4, 5, 6)
    avoiding_fraction: float = 0.2
    lam: float = 18.0
    weight_epochs: int = 200
    weight_lr: float = 1.0
    rollout_seeds: int = 200
    rollout_regime: int = 0
    rollout_seed_start: int = 1_000_000
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.large_geometries = tuple(self.large_geometries)
        self.ind_regimes = tuple(int(r) for r in self.ind_regimes)
        self.ood_regimes = tuple(int(r) for r in self.ood_regimes)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        bad = [g for g in self.large_geometries if g not in GEOMETRIES]
        if bad:
            raise ConfigError(f"unknown geometries {bad}")
        if not self.families:
            raise ConfigError("need at least one embedding family")
        for name, over in self.families.items():
            unknown = set(over) - {"embed_seed", "rays_per_view", "embed_dim", "projection_hidden"}
            if unknown:
                raise ConfigError(f"family {name!r} overrides unsupported fields {sorted(unknown)}")
            self.world.replace(**over)  # validates the combination
        regs = set(self.ind_regimes) | set(self.ood_regimes)
        if not regs <= set(REGIMES):
            raise ConfigError(f"unknown regimes {sorted(regs - set(REGIMES))}")
        if set(self.ind_regimes) & set(self.ood_regimes) or not self.ind_regimes or not self.ood_regimes:
            raise ConfigError("IND and OOD regimes must be non-empty and disjoint")
        if self.n_per_cell < 1 or self.per_regime < 1:
            raise ConfigError("n_per_cell and per_regime must be positive")
        if not 0 <= self.avoiding_fraction <= 1:
            raise ConfigError("avoiding_fraction must lie in [0, 1]")

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "train": self.train.to_dict(),
            "families": {k: dict(v) for k, v in sorted(self.families.items())},
            "methods": list(self.methods),
            "n_per_cell": self.n_per_cell,
            "large_geometries": list(self.large_geometries),
            "large_method": self.large_method,
            "per_regime": self.per_regime,
            "ind_regimes": list(self.ind_regimes),
            "ood_regimes": list(self.ood_regimes),
            "avoiding_fraction": self.avoiding_fraction,
            "lam": self.lam,
            "weight_epochs": self.weight_epochs,
            "weight_lr": self.weight_lr,
            "rollout_seeds": self.rollout_seeds,
            "rollout_regime": self.rollout_regime,
            "rollout_seed_start": self.rollout_seed_start,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            world = WorldConfig.from_dict({**WorldConfig().to_dict(), **d.pop("world", {})})
            train = TrainConfig(**{**TrainConfig().to_dict(), **d.pop("train", {})})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cls(world=world, train=train, **d)

    def canonical_json(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")  # where results go does not change them
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineConfig":
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(d)


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_yaml(Path(path).read_text())


def smoke_config(**kw) -> PipelineConfig:
    """Tiny end-to-end run: 20 trajectories, 2 members per cell, short training."""
    base = PipelineConfig(
        train=TrainConfig(epochs=8, dynamics_epochs=10),
        n_per_cell=2,
        per_regime=4,
        ind_regimes=(0, 1, 2, 3),
        ood_regimes=(4,),
        weight_epochs=50,
        rollout_seeds=5,
        output_dir="runs/smoke",
    )
    return base.replace(**kw)


PRESETS = {"default": PipelineConfig, "smoke": smoke_config}
