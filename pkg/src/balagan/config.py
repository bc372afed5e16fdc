"""Run configuration: one schema covering every pipeline stage.

Configs load from YAML files with sections {data, modalities, model, losses,
trainer, ablation, eval}. Unknown keys are rejected so typos fail fast, and
the content hash is computed over a canonically sorted JSON dump, making it
stable under key reordering.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

CONFIG_VERSION = 1


def _check_keys(section: str, data: dict, cls) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}; "
                          f"known keys: {sorted(known)}")
    return data


@dataclass
class DataConfig:
    manifest: str = ""
    resolution: tuple = (64, 64)
    value_range: tuple = (-1.0, 1.0)


@dataclass
class ModalitiesConfig:
    k: int | str = "auto"           # "auto" applies the minimal-k balance rule
    assignment: str = ""            # path of the assignment file to read or write
    temperature: float = 0.5
    batch_size: int = 16
    steps: int = 300
    learning_rate: float = 1e-3
    embedding_dim: int = 128
    projection_dim: int = 64
    base_width: int = 32
    allow_invalid_k: bool = False


@dataclass
class ModelConfig:
    base_width: int = 32
    style_dim: int = 64
    n_content_blocks: int = 2
    n_decoder_blocks: int = 2
    mlp_width: int = 128
    d_base_width: int = 32


@dataclass
class LossesConfig:
    lambda_ce: float = 1.0
    lambda_reg: float = 10.0
    lambda_r: float = 0.1
    lambda_f: float = 1.0
    r1_mode: str = "true-class"     # or "sum"


@dataclass
class TrainerConfig:
    steps: int = 2000
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 500
    log_every: int = 1
    seed: int = 0
    class_sampling: str = "class-uniform"   # or "image-uniform"
    mode: str = "imbalanced"                # or "balanced"
    ema: bool = False
    ema_decay: float = 0.999


@dataclass
class AblationConfig:
    use_dcls: bool = True
    include_target: bool = True


@dataclass
class EvalConfig:
    extractor: str = "frozen"
    extractor_seed: int = 2024
    feature_dim: int = 64
    n_eval: int = 64
    pairing_seed: int = 0


_SECTIONS = {
    "data": DataConfig,
    "modalities": ModalitiesConfig,
    "model": ModelConfig,
    "losses": LossesConfig,
    "trainer": TrainerConfig,
    "ablation": AblationConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    name: str = "run"
    version: int = CONFIG_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    modalities: ModalitiesConfig = field(default_factory=ModalitiesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossesConfig = field(default_factory=LossesConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        top_known = {"name", "version"} | set(_SECTIONS)
        unknown = set(data) - top_known
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}; "
                              f"known: {sorted(top_known)}")
        version = int(data.pop("version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")
        kwargs = {"name": str(data.pop("name", "run")), "version": version}
        for section, section_cls in _SECTIONS.items():
            raw = data.pop(section, {}) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"section [{section}] must be a mapping, got {type(raw).__name__}")
            coerced = dict(_check_keys(section, raw, section_cls))
            for f in fields(section_cls):
                if f.name in coerced and f.type == "tuple" and isinstance(coerced[f.name], list):
                    coerced[f.name] = tuple(coerced[f.name])
            kwargs[section] = section_cls(**coerced)
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        """Return a copy with dotted-path overrides applied (e.g. trainer.steps=100)."""
        data = self.to_dict()
        for path, value in overrides.items():
            parts = path.split(".")
            node = data
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config path: {path}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config path: {path}")
            old = node[parts[-1]]
            node[parts[-1]] = _coerce_like(old, value)
        return RunConfig.from_dict(data)


def _coerce_like(old, value):
    if isinstance(value, str):
        if isinstance(old, bool):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"expected boolean, got {value!r}")
        if isinstance(old, int) and not isinstance(old, bool):
            try:
                return int(value)
            except ValueError:
                return value    # fields like k accept "auto"
        if isinstance(old, float):
            return float(value)
        if isinstance(old, (list, tuple)):
            return [_coerce_like(old[0] if old else "", v) for v in value.split(",")]
    return value
