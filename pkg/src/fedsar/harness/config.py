"""Experiment configuration: YAML in, validated dataclasses out."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from fedsar.adversary import MODES, SCHEDULES
from fedsar.aggregation import RULES
from fedsar.defense import TAU_STEPS
from fedsar.errors import ConfigurationError


@dataclass
class DataConfig:
    num_classes: int = 10
    train_per_class: int = 300
    test_per_class: int = 40
    chip_size: int = 32
    looks: float = 3.0
    alpha: float = 0.5
    min_per_client: int = 10
    probe_size: int = 50


@dataclass
class AttackConfig:
    malicious_fraction: float = 0.3
    malicious_ids: list[int] | None = None
    ratio: float = 0.3
    target: int = 0
    schedule: str = "persistent"
    start_round: int = 5
    trigger_mode: str = "spectral-LL"
    trigger_location: list[int] = field(default_factory=lambda: [8, 8])
    trigger_amplitude: float = 0.8


@dataclass
class DefenseConfig:
    zeta: float = 1.5
    gamma: float = 1.0
    delta: float = 1.0
    xi: float = 0.05
    beta: float = 0.5
    levels: int = 3
    looks: float = 3.0
    tau_percentile: float = 95.0
    adapt: bool = True


@dataclass
class AblationConfig:
    no_fdci: bool = False
    no_naat: bool = False
    no_dhat: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 1
    num_clients: int = 10
    sample_fraction: float = 0.5
    rounds: int = 60
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    aggregator: str = "nadafd"
    krum_f: int = 1
    auc_looks: list[float] = field(default_factory=lambda: [8.0, 4.0, 2.0, 1.0])
    workers: int = 1
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "ExperimentConfig":
        if self.num_clients < 2:
            raise ConfigurationError(f"num_clients must be >= 2, got {self.num_clients}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigurationError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("local_epochs and batch_size must be >= 1")
        if self.aggregator not in RULES:
            raise ConfigurationError(f"aggregator must be one of {RULES}, got {self.aggregator!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if len(self.auc_looks) < 2:
            raise ConfigurationError("auc_looks needs at least two ENL values")
        d = self.data
        if d.chip_size % (2 ** max(self.defense.levels, 3)):
            raise ConfigurationError(
                f"chip_size {d.chip_size} must be divisible by 2^{max(self.defense.levels, 3)}"
            )
        if d.probe_size < d.num_classes:
            raise ConfigurationError("probe_size must be at least num_classes")
        a = self.attack
        if a.schedule not in SCHEDULES:
            raise ConfigurationError(f"attack.schedule must be one of {SCHEDULES}, got {a.schedule!r}")
        if a.trigger_mode not in MODES:
            raise ConfigurationError(f"attack.trigger_mode must be one of {MODES}, got {a.trigger_mode!r}")
        if not 0.0 <= a.malicious_fraction < 1.0:
            raise ConfigurationError("attack.malicious_fraction must lie in [0, 1)")
        if a.malicious_ids is not None and any(not 0 <= i < self.num_clients for i in a.malicious_ids):
            raise ConfigurationError(f"attack.malicious_ids must be client ids in [0, {self.num_clients})")
        if not 0 <= a.target < d.num_classes:
            raise ConfigurationError("attack.target must be a valid class")
        if self.defense.tau_percentile not in TAU_STEPS:
            raise ConfigurationError(f"defense.tau_percentile must be one of {TAU_STEPS}")
        return self

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.sample_fraction * self.num_clients - 1e-9))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {"data": DataConfig, "attack": AttackConfig, "defense": DefenseConfig, "ablation": AblationConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigurationError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS and not where:
            kwargs[key] = _build(_SECTIONS[key], value or {}, key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, raw or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    return path


def with_overrides(cfg: ExperimentConfig, **dotted) -> ExperimentConfig:
    """Copy of ``cfg`` with ``section.key=value`` style overrides applied."""
    raw = cfg.to_dict()
    for key, value in dotted.items():
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigurationError(f"unknown config section in override {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key in override {key!r}")
        node[parts[-1]] = value
    return config_from_dict(raw)
