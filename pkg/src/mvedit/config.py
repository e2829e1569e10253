"""Run configuration: every knob of a generate/match/edit/evaluate run.

Configs are frozen dataclasses built from JSON. Unknown keys are rejected at
every nesting level so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .consistency import ConsistencyConfig
from .diffusion import GuidanceConfig
from .matching import MatchFilterConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    texture_size: int = 128
    texture_kind: str = "noise"
    n_views: int = 6
    spread: float = 0.1

    def __post_init__(self) -> None:
        if self.texture_size < 8:
            raise ValueError("texture_size must be >= 8")
        if self.n_views < 2:
            raise ValueError("n_views must be >= 2")
        if not 0.0 <= self.spread <= 0.3:
            raise ValueError("spread must lie in [0, 0.3]")


@dataclass(frozen=True)
class MatchConfig:
    mode: str = "oracle"
    grid_step: int = 1
    filter: MatchFilterConfig = field(default_factory=MatchFilterConfig)

    def __post_init__(self) -> None:
        if self.mode not in ("oracle", "file"):
            raise ValueError(f"unknown match mode {self.mode!r}")
        if self.grid_step < 1:
            raise ValueError("grid_step must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    n_variants: int = 8
    T: int = 1000
    schedule: str = "linear"

    def __post_init__(self) -> None:
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 2 <= self.n_variants <= 12:
            raise ValueError("n_variants must lie in [2, 12]")


@dataclass(frozen=True)
class ExperimentConfig:
    sessions: int = 20
    lambda_sweep: tuple[float, ...] = (0.0, 0.01, 0.1, 1.0, 10.0)
    sweep_sessions: int = 4
    # Tuning sessions use seeds offset by this much, disjoint from evaluation.
    sweep_seed_offset: int = 10_000
    heldout: str = "every:5"
    ablation: bool = False
    ablation_neighbors: tuple[int, ...] = (1, 2, 3)
    ablation_backward: tuple[int, ...] = (0, 3, 6)

    def __post_init__(self) -> None:
        if self.sessions < 1 or self.sweep_sessions < 0:
            raise ValueError("session counts must be positive")
        if not self.lambda_sweep:
            raise ValueError("lambda_sweep must not be empty")
        if any(v < 0 for v in self.lambda_sweep):
            raise ValueError("lambda values must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    consistency: ConsistencyConfig = field(default_factory=lambda: ConsistencyConfig(patch_size=16))
    matching: MatchConfig = field(default_factory=MatchConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    engine: str = "multistep"
    ordering: str = "dataset"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.engine not in ("multistep", "onestep"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.ordering not in ("dataset", "greedy"):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.guidance.n_g > self.model.T or self.guidance.num_steps > self.model.T:
            raise ValueError("guidance timesteps exceed the schedule length")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
