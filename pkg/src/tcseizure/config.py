"""One JSON document configuring every pipeline stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .costmodel import OperatingPoint
from .preprocess import SplitPlan
from .synth import SynthConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    seed: int = 0
    n_channels: int = 16
    band_hz: tuple[float, float] = (0.1, 50.0)
    filter_order: int = 10
    split: SplitPlan = SplitPlan()


@dataclass(frozen=True)
class PostprocConfig:
    window: int = 5
    calib_patients: tuple[str, ...] | None = None  # None: seeded random pick
    n_calib: int = 2
    hmm_input: str = "threshold"  # labels after threshold moving, or "argmax"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hmm_input not in ("threshold", "argmax"):
            raise ConfigError("hmm_input must be 'threshold' or 'argmax'")
        if self.n_calib < 1:
            raise ConfigError("n_calib must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    synth: SynthConfig = SynthConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    train: TrainConfig = field(default_factory=TrainConfig)
    postproc: PostprocConfig = PostprocConfig()
    cost: OperatingPoint = OperatingPoint()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        return _build(cls, data, "")

    @classmethod
    def load(cls, path: str | Path | None) -> PipelineConfig:
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        key = f"{where}.{name}" if where else name
        if hasattr(current, "__dataclass_fields__"):
            kwargs[name] = _build(type(current), value, key)
        elif isinstance(current, tuple) or (value is not None and isinstance(value, list)):
            kwargs[name] = tuple(value) if value is not None else None
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
