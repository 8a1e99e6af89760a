"""Run configuration: JSON round-trippable settings for the CLI and service."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .gridworld import DISTRIBUTION_TAGS
from .training import CurriculumSchedule, LossConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    distribution_tag: str = "D"
    n_train: int = 4000
    n_cal: int = 400
    n_val: int = 400
    alpha: float = 0.05
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2)
    out_dir: str = "runs"

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.validate()

    def validate(self):
        if self.distribution_tag not in DISTRIBUTION_TAGS:
            raise ConfigError(f"unknown distribution_tag {self.distribution_tag!r}")
        for name in ("n_train", "n_cal", "n_val"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["v"] = 1
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("v", None)
        try:
            if "loss" in d and isinstance(d["loss"], dict):
                d["loss"] = LossConfig(**d["loss"])
            if "train" in d and isinstance(d["train"], dict):
                train = dict(d["train"])
                if isinstance(train.get("curriculum"), dict):
                    train["curriculum"] = CurriculumSchedule(**train["curriculum"])
                d["train"] = TrainConfig(**train)
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())
