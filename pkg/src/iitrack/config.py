"""Run configuration: dataclasses, validation and JSON loading."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass(frozen=True)
class WorldConfig:
    n_sequences: int = 200
    n_frames: int = 20
    dt: float = 0.2
    min_objects: int = 1
    max_objects: int = 6
    ego_speed: float = 9.0
    # (lateral offset m, travel direction +1 along ego heading / -1 against)
    lanes: tuple[tuple[float, int], ...] = ((-7.0, -1), (-3.5, -1), (0.0, 1), (3.5, 1), (7.0, 1))
    speed_range: tuple[float, float] = (4.0, 14.0)
    spawn_x_range: tuple[float, float] = (-70.0, 70.0)
    min_gap: float = 10.0
    heading_noise: float = 0.02
    truck_fraction: float = 0.3
    appearance_dim: int = 8
    occlusion_persistence: int = 5

    def validate(self, prefix: str = "world") -> None:
        _positive(prefix, self, "n_sequences", "n_frames", "dt", "appearance_dim")
        _nonneg(prefix, self, "min_objects", "max_objects", "heading_noise", "min_gap",
                "occlusion_persistence")
        if self.min_objects > self.max_objects:
            raise ConfigError(f"{prefix}.min_objects", "exceeds max_objects")
        if not 0.0 <= self.truck_fraction <= 1.0:
            raise ConfigError(f"{prefix}.truck_fraction", "must lie in [0, 1]")
        if not self.lanes:
            raise ConfigError(f"{prefix}.lanes", "need at least one lane")
        for i, lane in enumerate(self.lanes):
            if len(lane) != 2 or lane[1] not in (1, -1):
                raise ConfigError(f"{prefix}.lanes[{i}]", "expected [offset, +1|-1]")
        if self.speed_range[0] > self.speed_range[1] or self.speed_range[0] < 0:
            raise ConfigError(f"{prefix}.speed_range", "expected 0 <= low <= high")
        if self.spawn_x_range[0] >= self.spawn_x_range[1]:
            raise ConfigError(f"{prefix}.spawn_x_range", "expected low < high")


@dataclass(frozen=True)
class SensorModel:
    sigma_pos: float = 0.15
    sigma_dim: float = 0.05
    sigma_theta: float = 0.02
    sigma_app: float = 0.1
    p_miss: float = 0.05
    clutter_rate: float = 0.5
    r_max: float = 50.0
    grid_extent: float = 100.0
    cell: float = 1.0

    def validate(self, prefix: str = "sensor") -> None:
        _nonneg(prefix, self, "sigma_pos", "sigma_dim", "sigma_theta", "sigma_app", "clutter_rate")
        if not 0.0 <= self.p_miss <= 1.0:
            raise ConfigError(f"{prefix}.p_miss", "must lie in [0, 1]")
        _positive(prefix, self, "r_max", "grid_extent", "cell")
        if round(self.grid_extent / self.cell) < 1:
            raise ConfigError(f"{prefix}.grid_extent", "smaller than one cell")

    def scaled(self, factor: float) -> "SensorModel":
        """Same sensor with every noise sigma multiplied by ``factor``."""
        return replace(self, sigma_pos=self.sigma_pos * factor, sigma_dim=self.sigma_dim * factor,
                       sigma_theta=self.sigma_theta * factor, sigma_app=self.sigma_app * factor)

    @property
    def grid_cells(self) -> int:
        return int(round(self.grid_extent / self.cell))


@dataclass(frozen=True)
class ScmConfig:
    tau_iou: float = 0.3
    tau_app: float = 0.5
    r_max: float = 50.0
    matches_any: str = "or"

    def validate(self, prefix: str = "scm") -> None:
        if not 0.0 < self.tau_iou < 1.0:
            raise ConfigError(f"{prefix}.tau_iou", "must lie in (0, 1)")
        if not -1.0 < self.tau_app < 1.0:
            raise ConfigError(f"{prefix}.tau_app", "must lie in (-1, 1)")
        _positive(prefix, self, "r_max")
        if self.matches_any not in ("or", "appearance"):
            raise ConfigError(f"{prefix}.matches_any", "must be 'or' or 'appearance'")


@dataclass(frozen=True)
class NetConfig:
    appearance_dim: int = 8
    bbox_dim: int = 16
    hidden_dim: int = 16
    rounds: int = 1
    horizon: int = 3
    lstm_dim: int = 16
    aggregation: str = "sum"
    forecast_prior: str = "constant_velocity"

    def validate(self, prefix: str = "net") -> None:
        _positive(prefix, self, "appearance_dim", "bbox_dim", "hidden_dim", "rounds",
                  "horizon", "lstm_dim")
        if self.hidden_dim % 4:
            raise ConfigError(f"{prefix}.hidden_dim", "must be a multiple of 4 (aligned quarters)")
        if self.aggregation not in ("sum", "mean"):
            raise ConfigError(f"{prefix}.aggregation", "must be 'sum' or 'mean'")
        if self.forecast_prior not in ("none", "constant_velocity"):
            raise ConfigError(f"{prefix}.forecast_prior", "must be 'none' or 'constant_velocity'")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    w_task: float = 1.0
    w_iit: float = 1.0
    w_probe: float = 0.1
    w_forecast: float = 0.1
    lr: float = 3e-3
    momentum: float = 0.9
    optimizer: str = "momentum"
    epochs: int = 30
    frames_per_step: int = 4
    batch_size: int = 7
    within_frame_ratio: float = 0.5
    pool_per_label: int = 500
    probe_margin: float = 1.0
    holdout_fraction: float = 0.2
    seed: int = 0

    def validate(self, prefix: str = "train") -> None:
        _positive(prefix, self, "margin", "frames_per_step")
        _nonneg(prefix, self, "w_task", "w_iit", "w_probe", "w_forecast", "lr", "momentum",
                "epochs", "batch_size", "pool_per_label")
        if self.optimizer not in ("sgd", "momentum"):
            raise ConfigError(f"{prefix}.optimizer", "must be 'sgd' or 'momentum'")
        if not 0.0 <= self.within_frame_ratio <= 1.0:
            raise ConfigError(f"{prefix}.within_frame_ratio", "must lie in [0, 1]")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"{prefix}.holdout_fraction", "must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    scm: ScmConfig = field(default_factory=ScmConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 1
    paths: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        self.world.validate()
        self.sensor.validate()
        self.scm.validate()
        self.net.validate()
        self.train.validate()
        if self.net.appearance_dim != self.world.appearance_dim:
            raise ConfigError("net.appearance_dim", "must equal world.appearance_dim")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed", "integer seed required")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _positive(prefix, obj, *names):
    for n in names:
        v = getattr(obj, n)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"{prefix}.{n}", f"must be a positive number, got {v!r}")


def _nonneg(prefix, obj, *names):
    for n in names:
        v = getattr(obj, n)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v >= 0:
            raise ConfigError(f"{prefix}.{n}", f"must be a non-negative number, got {v!r}")


_SECTIONS = {"world": WorldConfig, "sensor": SensorModel, "scm": ScmConfig,
             "net": NetConfig, "train": TrainConfig}


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
        default = getattr(cls(), key) if key in known else None
        if isinstance(default, tuple):
            value = _tuplify(value, f"{prefix}.{key}")
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif default is not None and not isinstance(default, dict) and type(value) is not type(default):
            raise ConfigError(f"{prefix}.{key}",
                              f"expected {type(default).__name__}, got {type(value).__name__}")
        kwargs[key] = value
    return cls(**kwargs)


def _tuplify(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, "expected a list")
    return tuple(_tuplify(v, path) if isinstance(v, (list, tuple)) else v for v in value)


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected an object")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "seed":
            kwargs["seed"] = value
        elif key == "paths":
            if not isinstance(value, dict):
                raise ConfigError("paths", "expected an object")
            kwargs["paths"] = dict(value)
        else:
            raise ConfigError(key, "unknown section")
    if "seed" not in kwargs:
        raise ConfigError("seed", "required (no wall-clock seeding)")
    return RunConfig(**kwargs).validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    return from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
