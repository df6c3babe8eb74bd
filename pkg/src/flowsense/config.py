"""Experiment configuration: one JSON document per experiment, hashed into
every output for reproducibility audits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .mesh import GeometrySpec, mask_cardinality
from .model import ModelConfig
from .policy import PolicyConfig, PPOSchedule
from .storage import sha256_of_json
from .training import TrainSchedule

PLACEMENT_STRATEGIES = ("uniform", "random", "qr", "dopt", "policy")
_SPLITS = ("train", "val", "test")
_PATH_KEYS = ("dataset_dir", "recon_checkpoint", "policy_checkpoint")


@dataclass
class ExperimentConfig:
    geometry: GeometrySpec
    snapshot_count: int
    split_fractions: dict
    noise_scale: float = 0.05
    densities: tuple = (0.05, 0.10, 0.20, 0.30)
    strategies: tuple = ("uniform", "random")
    eval_density: float = 0.10
    basis_rank: int = 8
    knn_k: int = 5
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    policy_net: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PPOSchedule = field(default_factory=PPOSchedule)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.densities = tuple(float(d) for d in self.densities)
        self.strategies = tuple(self.strategies)
        self.split_fractions = {k: float(v) for k, v in self.split_fractions.items()}
        if self.snapshot_count < 1:
            raise ConfigError("snapshot_count must be >= 1")
        if set(self.split_fractions) != set(_SPLITS):
            raise ConfigError(f"split_fractions needs exactly the keys {_SPLITS}")
        if any(v < 0 for v in self.split_fractions.values()):
            raise ConfigError("split fractions must be >= 0")
        if abs(sum(self.split_fractions.values()) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if not self.densities or any(not 0 < d <= 1 for d in self.densities):
            raise ConfigError("densities must lie in (0, 1]")
        if not self.strategies or any(s not in PLACEMENT_STRATEGIES for s in self.strategies):
            raise ConfigError(f"strategies must come from {PLACEMENT_STRATEGIES}")
        if not 0 < self.eval_density < 1:
            raise ConfigError("eval_density must lie in (0, 1)")
        if self.basis_rank < 1 or self.knn_k < 1:
            raise ConfigError("basis_rank and knn_k must be >= 1")
        if any(k not in _PATH_KEYS for k in self.paths):
            raise ConfigError(f"paths keys must come from {_PATH_KEYS}")

    def split_counts(self):
        """Snapshot counts per split; rounding remainder goes to train."""
        n = self.snapshot_count
        counts = {s: int(round(self.split_fractions[s] * n)) for s in ("val", "test")}
        counts["train"] = n - counts["val"] - counts["test"]
        if counts["train"] < 1:
            raise ConfigError("split fractions leave no training snapshots")
        return counts

    def path(self, key):
        """A referenced artifact path, or None when the config omits it."""
        value = self.paths.get(key)
        return None if value is None else Path(value)

    def to_dict(self):
        return {
            "geometry": self.geometry.to_dict(),
            "snapshot_count": self.snapshot_count,
            "split_fractions": dict(self.split_fractions),
            "noise_scale": self.noise_scale,
            "densities": list(self.densities),
            "strategies": list(self.strategies),
            "eval_density": self.eval_density,
            "basis_rank": self.basis_rank,
            "knn_k": self.knn_k,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "policy_net": self.policy_net.to_dict(),
            "ppo": self.ppo.to_dict(),
            "paths": {k: str(v) for k, v in self.paths.items()},
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {
            "geometry", "snapshot_count", "split_fractions", "noise_scale", "densities",
            "strategies", "eval_density", "basis_rank", "knn_k", "model", "train",
            "policy_net", "ppo", "paths",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, parser in (
            ("geometry", GeometrySpec.from_dict),
            ("model", ModelConfig.from_dict),
            ("train", TrainSchedule.from_dict),
            ("policy_net", PolicyConfig.from_dict),
            ("ppo", PPOSchedule.from_dict),
        ):
            if key in d:
                d[key] = parser(d[key])
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError(f"bad experiment config: {err}") from None

    def config_hash(self):
        return sha256_of_json(self.to_dict())

    def cardinality(self, density, node_count=None):
        n = self.geometry.node_count if node_count is None else node_count
        return mask_cardinality(density, n)


def load_config(path):
    """Parse a JSON experiment config; artifact paths resolve against the
    config file's directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    cfg = ExperimentConfig.from_dict(raw)
    base = path.parent
    cfg.paths = {
        k: str(v if Path(v).is_absolute() else base / v) for k, v in cfg.paths.items()
    }
    return cfg


def save_config(path, config):
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=1, sort_keys=True)
