"""Experiment configuration: TOML file sections plus ``section.key=value`` overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence

import tomli

from .engine import IDiPTConfig
from .errors import ConfigError
from .vit import ViTConfig

METHODS = ("idipt", "source_only", "entropy_min")


@dataclass
class DatasetSection:
    n_domains: int = 4
    n_per_domain: int = 1600
    image_size: int = 32
    patch_size: int = 8
    seed: int = 0


@dataclass
class ModelSection:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    dropout_rate: float = 0.1
    epochs: int = 40
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    prefix_rows: int = 12
    prefix_scale: float = 0.2
    min_val_accuracy: float = 0.95

    def vit_config(self, dataset: DatasetSection) -> ViTConfig:
        return ViTConfig(
            image_size=dataset.image_size,
            patch_size=dataset.patch_size,
            depth=self.depth,
            dim=self.dim,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            n_classes=2,
            dropout_rate=self.dropout_rate,
        )


@dataclass
class StreamSection:
    delta: float = 1.0
    fragments_per_domain: int = 10
    seeds: List[int] = field(default_factory=lambda: list(range(8)))


@dataclass
class MethodSection:
    name: str = "idipt"
    specific_len: int = 8
    invariant_len: int = 4
    mc_passes: int = 10
    mask_ratio: float = 0.3
    bank_size: int = 20
    beta: float = 0.1
    gamma: float = 0.9
    node_dim: int = 512
    lr: float = 1e-3
    use_uom: bool = True
    use_pgd: bool = True
    normalize_weights: bool = True
    target_mode: str = "soft"
    prompt_max_norm: Optional[float] = 1.0
    entropy_lr: float = 1e-3

    def idipt_config(self) -> IDiPTConfig:
        names = {f.name for f in fields(IDiPTConfig)}
        return IDiPTConfig(**{k: v for k, v in asdict(self).items() if k in names})

    @property
    def tag(self) -> str:
        if self.name != "idipt":
            return self.name
        parts = ["idipt"]
        if not self.use_uom:
            parts.append("nouom")
        if not self.use_pgd:
            parts.append("nopgd")
        return "-".join(parts)


@dataclass
class RunSection:
    source_domain: int = 0
    n_segments: int = 8
    workers: int = 1
    dtype: str = "float32"


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "stream": StreamSection,
    "method": MethodSection,
    "run": RunSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    stream: StreamSection = field(default_factory=StreamSection)
    method: MethodSection = field(default_factory=MethodSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        if self.method.name not in METHODS:
            raise ConfigError(f"method.name must be one of {METHODS}, got {self.method.name!r}")
        if self.method.target_mode not in ("soft", "hard"):
            raise ConfigError(f"method.target_mode must be 'soft' or 'hard', got {self.method.target_mode!r}")
        if self.run.dtype not in ("float32", "float64"):
            raise ConfigError(f"run.dtype must be float32 or float64, got {self.run.dtype!r}")
        if not self.stream.seeds:
            raise ConfigError("stream.seeds must not be empty")
        if self.dataset.n_domains < 2:
            raise ConfigError(f"dataset.n_domains must be >= 2, got {self.dataset.n_domains}")
        if not 0 <= self.run.source_domain < self.dataset.n_domains:
            raise ConfigError(f"run.source_domain {self.run.source_domain} outside 0..{self.dataset.n_domains - 1}")
        self.model.vit_config(self.dataset)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def section_digest(self, *names: str) -> str:
        payload = json.dumps({n: asdict(getattr(self, n)) for n in names}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            values = dict(data.get(name, {}))
            allowed = {f.name for f in fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            kwargs[name] = section_cls(**values)
        return cls(**kwargs).validate()


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must be qualified as section.key")
        section, key = dotted.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override {item!r}")
        if key not in data[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        data[section][key] = _parse_value(text.strip())
    return ExperimentConfig.from_dict(data)


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    if path is None:
        config = ExperimentConfig()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with path.open("rb") as fh:
            config = ExperimentConfig.from_dict(tomli.load(fh))
    return apply_overrides(config, overrides)


def with_method(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, method=replace(config.method, **changes)).validate()
