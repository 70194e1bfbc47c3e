"""Run configuration document (JSON) tying every module's settings together."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .audio_data import FeatureConfig
from .errors import ConfigurationError
from .losses import MultiResConfig
from .noise_model import NetworkConfig
from .schedules import NoiseSchedule, ScheduleRange, linear_schedule, paper_range, schedule_from_dict

PRETRAIN = "PRETRAIN"
FINETUNE = "FINETUNE"

DEFAULT_LAMBDA = {2: 5e-4, 3: 5e-4, 6: 1e-3}
PRETRAIN_LR = 2e-4
FINETUNE_LR = 5.8e-5


@dataclass(frozen=True)
class TrainingConfig:
    phase: str = PRETRAIN
    lambda_by_N: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDA))
    n_modes: tuple[int, ...] = (3,)
    ranges_by_N: dict = field(default_factory=lambda: {n: paper_range(n) for n in (2, 3, 6)})
    batch_size: int = 16
    learning_rate: float | None = None  # None: phase default
    max_steps: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    grad_clip: float = 1.0
    sigma_mode: str = "posterior"
    inject_noise: bool = True  # injection noise inside the differentiable unroll
    log_every: int = 1

    def __post_init__(self):
        if self.phase not in (PRETRAIN, FINETUNE):
            raise ConfigurationError(f"unknown phase {self.phase!r}")
        object.__setattr__(self, "n_modes", tuple(sorted(int(n) for n in self.n_modes)))
        object.__setattr__(self, "lambda_by_N", {int(k): float(v) for k, v in self.lambda_by_N.items()})
        object.__setattr__(
            self,
            "ranges_by_N",
            {int(k): v if isinstance(v, ScheduleRange) else ScheduleRange.from_dict(v) for k, v in self.ranges_by_N.items()},
        )
        if not self.n_modes:
            raise ConfigurationError("n_modes must be nonempty")
        for n in self.n_modes:
            if n not in self.ranges_by_N or n not in self.lambda_by_N:
                raise ConfigurationError(f"N={n} needs both a schedule range and a lambda")
            if self.ranges_by_N[n].N != n:
                raise ConfigurationError(f"range for N={n} has {self.ranges_by_N[n].N} steps")
        if any(v < 0 for v in self.lambda_by_N.values()):
            raise ConfigurationError("lambda must be nonnegative")
        if self.lr <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_steps < 0 or self.checkpoint_every < 1:
            raise ConfigurationError("batch_size >= 1, max_steps >= 0 and checkpoint_every >= 1 required")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return PRETRAIN_LR if self.phase == PRETRAIN else FINETUNE_LR

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "lambda_by_N": {str(k): v for k, v in sorted(self.lambda_by_N.items())},
            "n_modes": list(self.n_modes),
            "ranges_by_N": {str(k): v.to_dict() for k, v in sorted(self.ranges_by_N.items())},
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "max_steps": self.max_steps,
            "checkpoint_every": self.checkpoint_every,
            "seed": self.seed,
            "grad_clip": self.grad_clip,
            "sigma_mode": self.sigma_mode,
            "inject_noise": self.inject_noise,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "n_modes" in d:
            d["n_modes"] = tuple(d["n_modes"])
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig.desk)
    network: NetworkConfig = field(default_factory=NetworkConfig.desk)
    multires: MultiResConfig = field(default_factory=MultiResConfig.desk)
    schedule: NoiseSchedule = field(default_factory=lambda: linear_schedule(1e-6, 1e-2, 1000))

    def __post_init__(self):
        if self.network.hop_length != self.features.hop_length:
            raise ConfigurationError(
                f"upsampling product {self.network.hop_length} != hop length {self.features.hop_length}"
            )
        if self.network.n_mels != self.features.n_mels:
            raise ConfigurationError("network n_mels must match the feature config")

    @classmethod
    def desk(cls, **training_overrides) -> "RunConfig":
        return cls(training=TrainingConfig(**training_overrides))

    @classmethod
    def paper(cls, **training_overrides) -> "RunConfig":
        return cls(
            training=TrainingConfig(**training_overrides),
            features=FeatureConfig.paper(),
            network=NetworkConfig.paper(),
            multires=MultiResConfig.paper(),
        )

    def with_training(self, **changes) -> "RunConfig":
        return replace(self, training=replace(self.training, **changes))

    def to_dict(self) -> dict:
        return {
            "training": self.training.to_dict(),
            "features": self.features.to_dict(),
            "network": self.network.to_dict(),
            "multires": self.multires.to_dict(),
            "schedule": self.schedule.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        schedule = schedule_from_dict(d["schedule"]) if "schedule" in d else linear_schedule(1e-6, 1e-2, 1000)
        if not isinstance(schedule, NoiseSchedule):
            raise ConfigurationError("run config needs a training schedule, not an inference schedule")
        return cls(
            training=TrainingConfig.from_dict(d.get("training", {})),
            features=FeatureConfig(**d["features"]) if "features" in d else FeatureConfig.desk(),
            network=NetworkConfig.from_dict(d["network"]) if "network" in d else NetworkConfig.desk(),
            multires=MultiResConfig.from_dict(d["multires"]) if "multires" in d else MultiResConfig.desk(),
            schedule=schedule,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def load_run_config(path) -> RunConfig:
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"{path}: malformed run config ({exc})") from exc
