"""Pipeline configuration: one YAML file, strictly validated against dataclass schemas."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class ScenegenSection:
    n_per_species: int = 600
    size: int = 64
    glyph_scale: int = 5
    count_low: int = 1
    count_high: int = 12


@dataclass
class DatasetSection:
    balance: bool = True
    split_order: str = "augment-first"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    prompt_mode: str = "mixed"


@dataclass
class PretrainSection:
    steps: int = 5000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    n_source_per_species: int = 3000
    holdout_per_species: int = 60


@dataclass
class RemoteSection:
    base_url: str = "http://localhost:8000/v1"
    model: str = ""
    auth_env: str | None = "THERMALIGN_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4
    backoff_base: float = 1.0


@dataclass
class EvalSection:
    modes: tuple[str, ...] = ("closed", "open")
    backend: str = "local"
    parallelism: int = 1
    max_new_tokens: int = 8
    remote: RemoteSection = field(default_factory=RemoteSection)


@dataclass
class PipelineConfig:
    seed: int = 1
    output_root: str = "runs"
    scenegen: ScenegenSection = field(default_factory=ScenegenSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    align: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolve_path(self, path: str | os.PathLike) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.output_root) / p


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path} must be a list")
            kwargs[name] = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path} must be true or false")
            kwargs[name] = value
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path} must be a number")
            kwargs[name] = float(value)
        elif isinstance(current, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path} must be an integer")
            kwargs[name] = value
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict | None) -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {}, "")
    validate(cfg)
    return cfg


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return from_dict({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)


def to_dict(cfg: PipelineConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(dataclasses.asdict(cfg))


def dump_config(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def validate(cfg: PipelineConfig) -> None:
    if cfg.dataset.split_order not in ("augment-first", "split-first"):
        raise ConfigError("dataset.split_order must be augment-first or split-first")
    if cfg.dataset.prompt_mode not in ("closed", "open", "mixed"):
        raise ConfigError("dataset.prompt_mode must be closed, open or mixed")
    if len(cfg.dataset.ratios) != 3 or abs(sum(cfg.dataset.ratios) - 1) > 1e-9:
        raise ConfigError("dataset.ratios must be three numbers summing to 1")
    if cfg.eval.backend not in ("local", "remote"):
        raise ConfigError("eval.backend must be local or remote")
    for mode in cfg.eval.modes:
        if mode not in ("closed", "open"):
            raise ConfigError(f"eval.modes entries must be closed or open, got {mode!r}")
    if cfg.scenegen.n_per_species < 1:
        raise ConfigError("scenegen.n_per_species must be >= 1")
    try:
        cfg.align.validate()
    except ValueError as exc:
        raise ConfigError(f"align: {exc}") from exc
