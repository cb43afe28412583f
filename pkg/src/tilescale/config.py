"""Run configuration: one JSON document describing worlds, flights, model and sweep."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .ablation import SweepConfig
from .dataset import daypart_of
from .nn.model import ModelConfig
from .synth import OracleConfig, WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DaySpec:
    """One synthetic field day: its own terrain seed and sky clearness."""

    day_id: str
    seed: int
    clearness: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(size=512))
    oracle: OracleConfig = field(default_factory=OracleConfig)
    n_days: int = 4
    flight_times: tuple[float, ...] = (6.5, 14.0)
    test_days: tuple[str, ...] = ("d3",)
    clearness: tuple[float, ...] = ()
    sweep: SweepConfig = field(default_factory=SweepConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(stem_width=8, stage_widths=(8, 16, 16)))
    seed: int = 0
    out: str = "run"

    def __post_init__(self):
        if self.n_days < 2:
            raise ConfigError("need at least 2 days (training and test)")
        if not self.flight_times:
            raise ConfigError("flight_times is empty")
        for t in self.flight_times:
            try:
                daypart_of(t)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if len(set(self.flight_times)) != len(self.flight_times):
            raise ConfigError("duplicate flight times")
        ids = [d.day_id for d in self.days]
        unknown = sorted(set(self.test_days) - set(ids))
        if unknown:
            raise ConfigError(f"unknown test days {unknown}; days are {ids}")
        if not self.test_days or set(self.test_days) == set(ids):
            raise ConfigError("test_days must name at least one day and leave one for training")
        if self.clearness and len(self.clearness) != self.n_days:
            raise ConfigError("clearness needs one value per day")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def days(self) -> list[DaySpec]:
        """Day ``i`` uses terrain seed ``seed + i``."""
        cl = self.clearness or (self.world.clearness,) * self.n_days
        return [DaySpec(f"d{i}", self.seed + i, float(cl[i])) for i in range(self.n_days)]

    def world_for(self, day: DaySpec) -> WorldConfig:
        return replace(self.world, seed=day.seed, clearness=day.clearness)

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "oracle": self.oracle.to_dict(),
            "n_days": self.n_days,
            "flight_times": list(self.flight_times),
            "test_days": list(self.test_days),
            "clearness": list(self.clearness),
            "sweep": self.sweep.to_dict(),
            "model": self.model.to_dict(),
            "seed": self.seed,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {extra}")
        try:
            kw = dict(d)
            if "world" in kw:
                kw["world"] = WorldConfig.from_dict(kw["world"])
            if "oracle" in kw:
                kw["oracle"] = OracleConfig.from_dict(kw["oracle"])
            if "sweep" in kw:
                kw["sweep"] = SweepConfig.from_dict(kw["sweep"])
            if "model" in kw:
                kw["model"] = ModelConfig.from_dict(kw["model"])
            for key in ("flight_times", "test_days", "clearness"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)
