# This file is part of the UrbanVerse tool

# src/execution/run_config.py
import dataclasses
import logging
import os
from dataclasses import dataclass, fields

import yaml

from common.errors import ConfigError

SEED_ENV = "URBANVERSE_SEED"

ABLATIONS = {
    "UrbanVerse": {},
    "w/o-Prior": {"prior": "gaussian"},
    "w/o-Retr": {"retrieval": "random"},
    "w/o-EM+C": {"conditioning": "concat"},
    "w/o-EM+CA": {"conditioning": "xattn"},
    "w/o-DiffM": {"head": "point"},
}

CHOICES = {
    "prior": ("retrieved", "gaussian"),
    "retrieval": ("topk", "random"),
    "conditioning": ("em", "concat", "xattn"),
    "head": ("diffusion", "point"),
    "point_estimate": ("mean", "median"),
    "protocol": ("cross-city", "same-city"),
    "precision": (32, 64),
}


@dataclass
class RunConfig:
    """Class to store every hyper-parameter of a pipeline run"""

    # grid and walks
    edge_m: float = 150.0
    k: int = 8
    l: int = 4
    p: float = 1.0
    q: float = 0.1
    frozen_walks: bool = False
    # cell encoder
    rho: float = 0.3
    d: int = 144
    heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 1
    dropout: float = 0.1
    use_positions: bool = True
    pretrain_epochs: int = 100
    pretrain_batch: int = 64
    lr_pre: float = 1e-7
    # diffusion head
    T: int = 100
    beta_1: float = 1e-4
    beta_T: float = 0.02
    d_dn: int = 128
    lr_diff: float = 5e-3
    weight_decay: float = 0.01
    diff_epochs: int = 1500
    diff_batch: int = 256
    K: int = 5
    sr: int = 10
    point_estimate: str = "mean"
    allow_degenerate: bool = False
    finetune_epochs: int = 300
    # ablation switches
    prior: str = "retrieved"
    retrieval: str = "topk"
    conditioning: str = "em"
    head: str = "diffusion"
    # protocol and evaluation
    protocol: str = "cross-city"
    test_fraction: float = 0.2
    kde_bandwidth: float = None
    # runtime
    seed: int = None
    divergence_threshold: float = 1e6
    threads: int = 1
    precision: int = 32

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_yaml(cls, path):
        """Defaults overridden by the keys of a YAML file"""
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} not found")
        with open(path) as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: invalid YAML ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping of config fields")
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"{path}: unknown config fields {unknown}")
        types = {f.name: f.type for f in fields(cls)}
        for key, value in data.items():
            if types[key] in (int, float) and isinstance(value, str):
                try:
                    data[key] = types[key](float(value)) if types[key] is int else float(value)
                except ValueError:
                    raise ConfigError(f"{path}: {key}={value!r} is not a number") from None
        return cls(**data)

    def to_yaml(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(dataclasses.asdict(self), f, sort_keys=False)
        return path

    def apply_args(self, args):
        """Override with every CLI flag that was given (flags are kebab-case field names)"""
        for name in self.field_names():
            value = getattr(args, name, None)
            if value is not None:
                setattr(self, name, value)
        return self

    def with_overrides(self, **overrides):
        unknown = sorted(set(overrides) - set(self.field_names()))
        if unknown:
            raise ConfigError(f"unknown config fields {unknown}")
        return dataclasses.replace(self, **overrides)

    def resolve_seed(self):
        if self.seed is None:
            env = os.environ.get(SEED_ENV)
            try:
                self.seed = int(env) if env not in (None, "") else 0
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
            logging.info(f"Seed {self.seed} taken from {'$' + SEED_ENV if env else 'the default'}")
        return self.seed

    def validate(self):
        for name, choices in CHOICES.items():
            if getattr(self, name) not in choices:
                raise ConfigError(f"{name} must be one of {choices}, got {getattr(self, name)!r}")
        positive = ["edge_m", "k", "l", "p", "q", "d", "heads", "enc_layers", "T", "d_dn", "K", "sr",
                    "pretrain_batch", "diff_batch", "lr_pre", "lr_diff", "threads", "divergence_threshold"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.beta_1 <= self.beta_T < 1.0:
            raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got {self.beta_1}, {self.beta_T}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.dec_layers < 0 or self.pretrain_epochs < 0 or self.diff_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("layer and epoch counts must be non-negative")
        if self.kde_bandwidth is not None and not self.kde_bandwidth > 0:
            raise ConfigError(f"kde_bandwidth must be positive, got {self.kde_bandwidth}")
        return self

    def __str__(self):
        return ", ".join(f"{k}={v}" for k, v in dataclasses.asdict(self).items())
