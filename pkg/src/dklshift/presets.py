"""Named experiment presets and the experiment-level configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import ShiftConfig
from .errors import ConfigError
from .model import MODEL_KINDS, check_kind
from .train import TrainConfig

MODES = ("temporal-shift", "internal")
PRESET_NAMES = ("temporal-shift", "internal", "smoke")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything cmd_experiment needs besides the output directory."""

    mode: str = "temporal-shift"
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model_kinds: tuple = MODEL_KINDS
    n_runs: int = 10
    master_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if not self.model_kinds:
            raise ConfigError("at least one model kind is required")
        for kind in self.model_kinds:
            check_kind(kind)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "shift": self.shift.to_dict(),
            "train": self.train.to_dict(),
            "model_kinds": list(self.model_kinds),
            "n_runs": self.n_runs,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "shift" in d:
            d["shift"] = ShiftConfig.from_dict(d["shift"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "model_kinds" in d:
            d["model_kinds"] = tuple(d["model_kinds"])
        return cls(**d)


def preset(name: str) -> ExperimentConfig:
    """temporal-shift and internal mirror the two evaluation protocols;
    smoke is a seconds-scale end-to-end exercise of the same pipeline."""
    if name == "temporal-shift":
        return ExperimentConfig(mode="temporal-shift", shift=ShiftConfig(), n_runs=10)
    if name == "internal":
        return ExperimentConfig(
            mode="internal",
            shift=ShiftConfig.no_shift(n_era_a=3000, n_era_b=0),
            n_runs=10,
        )
    if name == "smoke":
        return ExperimentConfig(
            mode="temporal-shift",
            shift=ShiftConfig(n_era_a=200, n_era_b=140),
            train=replace(TrainConfig(), epochs=2),
            n_runs=1,
        )
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
