"""Run configuration: one JSON document describing a complete, reproducible run."""

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import MismatchScenario
from .pipeline import CropSamplerConfig
from .quantize import QuantizationMode
from .teacher import TeacherSpec
from .train import TrainConfig
from .world import WorldSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LabelConfig:
    mode: str = "full"
    num_crops: int = 32
    seed: int = 0

    def __post_init__(self):
        QuantizationMode.parse(self.mode)
        if self.num_crops < 1:
            raise ValueError("num_crops must be >= 1")

    @property
    def quantization(self):
        return QuantizationMode.parse(self.mode)


@dataclass(frozen=True)
class BenchConfig:
    batch_size: int = 256
    crops: tuple = (1, 2, 4, 8, 16, 32)
    batches: int = 1

    def __post_init__(self):
        object.__setattr__(self, "crops", tuple(int(m) for m in self.crops))


@dataclass(frozen=True)
class AnalysisConfig:
    scenario: MismatchScenario = MismatchScenario()
    sources: tuple = ("OneHot", "FKD", "ReLabel")
    students: tuple = ()  # (name, checkpoint path) pairs

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "students", tuple(tuple(s) for s in self.students))


@dataclass(frozen=True)
class Paths:
    store: str = "store"
    output: str = "run"


@dataclass(frozen=True)
class RunConfig:
    world: WorldSpec = WorldSpec()
    teacher: TeacherSpec = TeacherSpec()
    crop: CropSamplerConfig = CropSamplerConfig()
    labels: LabelConfig = LabelConfig()
    train: TrainConfig = TrainConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    bench: BenchConfig = BenchConfig()
    paths: Paths = field(default_factory=Paths)

    def check(self):
        if self.world.num_classes != self.teacher.num_classes:
            raise ConfigError("world and teacher disagree on the class count")
        if self.world.channels != self.teacher.channels:
            raise ConfigError("world and teacher disagree on the channel count")
        if self.crop.resolution != self.teacher.resolution:
            raise ConfigError("crop resolution must equal the teacher resolution")
        self.labels.quantization.validate_for(self.teacher.num_classes)
        return self


def _build(cls, data, where):
    if not dataclasses.is_dataclass(cls):
        return data
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f.type if dataclasses.is_dataclass(f.type) else None
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


def from_dict(data):
    return _build(RunConfig, data, "config").check()


def to_dict(cfg):
    return _plain(cfg)


def apply_overrides(data, overrides):
    """Apply ``section.field=value`` strings; values parse as JSON, else as text."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return data


def load(path=None, overrides=()):
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(apply_overrides(data, overrides))


def dumps(cfg):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"
