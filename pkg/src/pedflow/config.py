"""Run configuration: JSON file sections merged with defaults and CLI flags.

Top-level keys: ``ingest``, ``split``, ``anomaly``, ``graph``, ``train``,
``grid``, ``paths``. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .clustering import AnomalyConfig, TukeyConfig
from .errors import ConfigError
from .graph import GraphConfig
from .ingest import CsvSchema, SplitSpec
from .training import TrainConfig


@dataclass(frozen=True)
class IngestSection:
    sensor_id: str = "sensor_id"
    timestamp: str = "timestamp"
    count: str = "count"
    timestamp_format: str | None = None
    locations: str | None = None
    n_sensors: int | None = None

    def schema(self):
        return CsvSchema(self.sensor_id, self.timestamp, self.count, self.timestamp_format)


@dataclass(frozen=True)
class AnomalySection:
    k_range: tuple[int, ...] = (2, 3, 4)
    runs: int = 1000
    seed: int = 0
    max_iter: int = 100
    q: float = 1.5
    weekday: int | None = None
    min_cluster_size: int = 2
    per_cluster: bool = False

    def build(self):
        return AnomalyConfig(tuple(self.k_range), self.runs, self.seed, self.max_iter,
                             TukeyConfig(self.q), self.weekday, "abs", self.min_cluster_size,
                             self.per_cluster)


@dataclass(frozen=True)
class PathsSection:
    panel: str | None = None
    medoid: str | None = None
    graph: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    ingest: IngestSection = field(default_factory=IngestSection)
    split: SplitSpec = field(default_factory=SplitSpec)
    anomaly: AnomalySection = field(default_factory=AnomalySection)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: dict = field(default_factory=dict)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self):
        return asdict(self)

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path

    def override(self, section, **values):
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: _build(type(getattr(self, section)),
                                                {**asdict(getattr(self, section)), **values},
                                                section)})


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    return config_from_dict(data)


def config_from_dict(data) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name == "grid":
            if not isinstance(value, dict):
                raise ConfigError("grid must map TrainConfig fields to lists")
            bad = set(value) - {f.name for f in fields(TrainConfig)}
            if bad:
                raise ConfigError(f"unknown grid keys: {sorted(bad)}")
            kwargs[name] = {k: list(v) for k, v in value.items()}
            continue
        cls = type(getattr(RunConfig(), name))
        kwargs[name] = _build(cls, value, name)
    return RunConfig(**kwargs)
