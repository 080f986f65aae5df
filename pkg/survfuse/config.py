"""Run configuration: dataclasses, strict validation and loading"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from simpleconf import Config

from .defaults import (
    DEFAULT_IG_STEPS,
    DEFAULT_KEEP_PROB,
    DEFAULT_TOP_FRAC,
    ENV_SEED,
    N_BINS,
    SECTION_DATA,
    SECTION_EVAL,
    SECTION_MODEL,
    SECTION_TRAIN,
    logger,
)
from .errors import ConfigError

MODEL_KINDS = ("snn", "amil", "mmf")
RISK_SCHEMES = ("median", "quartile")


@dataclass
class ModelConfig:
    """Layer sizes; the defaults are the published ones"""

    proj_dim: int = 512
    attn_dim: int = 256
    snn_hidden: int = 256
    rep_dim: int = 32
    fusion_hidden: int = 256
    n_bins: int = N_BINS
    keep_prob: float = DEFAULT_KEEP_PROB

    def validate(self) -> None:
        for name in ("proj_dim", "attn_dim", "snn_hidden", "rep_dim", "fusion_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.n_bins != N_BINS:
            raise ConfigError(f"model.n_bins is fixed to {N_BINS}")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("model.keep_prob must be in (0, 1]")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-5
    l1: float = 1e-4
    epochs: int = 20
    beta_loss: float = 0.0
    seed: int = 0
    grad_accum: int = 1

    def validate(self) -> None:
        for name in ("lr", "adam_eps", "l2", "l1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        for name in ("beta1", "beta2", "beta_loss"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"train.{name} must be in [0, 1]")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.grad_accum < 1:
            raise ConfigError("train.grad_accum must be >= 1")


@dataclass
class DataConfig:
    """File names are relative to the data directory given on the CLI"""

    embeddings: str = "embeddings.csv"
    molecular: str = "molecular.csv"
    labels: str = "labels.csv"
    meta: str = "meta.csv"
    standardize: bool = True
    filter_genes: bool = False
    freq_threshold: float = 0.05
    rna_top_k: int = 2000

    def validate(self) -> None:
        if not 0 <= self.freq_threshold < 1:
            raise ConfigError("data.freq_threshold must be in [0, 1)")
        if self.rna_top_k < 0:
            raise ConfigError("data.rna_top_k must be >= 0")


@dataclass
class EvalConfig:
    n_folds: int = 5
    bootstrap_replicates: int = 1000
    ci_level: float = 0.95
    risk_scheme: str = "median"
    ig_steps: int = DEFAULT_IG_STEPS
    top_frac: float = DEFAULT_TOP_FRAC

    def validate(self) -> None:
        if self.n_folds < 2:
            raise ConfigError("eval.n_folds must be >= 2")
        if self.bootstrap_replicates < 2:
            raise ConfigError("eval.bootstrap_replicates must be >= 2")
        if not 0 < self.ci_level < 1:
            raise ConfigError("eval.ci_level must be in (0, 1)")
        if self.risk_scheme not in RISK_SCHEMES:
            raise ConfigError(f"eval.risk_scheme must be one of {RISK_SCHEMES}")
        if self.ig_steps < 2:
            raise ConfigError("eval.ig_steps must be >= 2")
        if not 0 < self.top_frac <= 1:
            raise ConfigError("eval.top_frac must be in (0, 1]")


SECTIONS = {
    SECTION_MODEL: ModelConfig,
    SECTION_TRAIN: TrainConfig,
    SECTION_DATA: DataConfig,
    SECTION_EVAL: EvalConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> RunConfig:
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    """Check a value against the type of its default"""
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
    return value


def from_mapping(data: Mapping[str, Any] | None) -> RunConfig:
    """Build a RunConfig from nested sections, rejecting unknown keys"""
    config = RunConfig()
    for section, values in (data or {}).items():
        if section not in SECTIONS:
            raise ConfigError(
                f"Unknown config section {section!r}, expected {list(SECTIONS)}"
            )
        if not isinstance(values, Mapping):
            raise ConfigError(f"Config section {section!r} must be a table")
        target = getattr(config, section)
        known = {f.name for f in fields(target)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"Unknown config key {section}.{key}")
            setattr(
                target,
                key,
                _coerce(section, key, getattr(target, key), value),
            )
    return config


def merge(base: Mapping[str, Any], other: Mapping[str, Any]) -> dict[str, Any]:
    """Section-wise merge, `other` wins"""
    out = {}
    for section, values in base.items():
        if not isinstance(values, Mapping):
            raise ConfigError(f"Config section {section!r} must be a table")
        out[section] = dict(values)
    for section, values in other.items():
        out.setdefault(section, {}).update(values)
    return out


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Mapping[str, Any]] | None = None,
) -> RunConfig:
    """Load a TOML/JSON config file, apply overrides and the seed env var

    Precedence: defaults < file < overrides < RJC_SEED.
    """
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            loaded = Config.load(str(path))
        except Exception as exc:
            raise ConfigError(f"Failed to load config {path}: {exc}") from None
        data = {
            sec: dict(vals) if isinstance(vals, Mapping) else vals
            for sec, vals in loaded.items()
        }
    if overrides:
        data = merge(data, overrides)

    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env_seed!r}")
        logger.info("Using seed %s from %s", seed, ENV_SEED)
        data = merge(data, {SECTION_TRAIN: {"seed": seed}})

    return from_mapping(data).validate()
