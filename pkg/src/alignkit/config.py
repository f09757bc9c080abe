"""Run configuration: nested TOML sections resolved into dataclasses."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .data import DEFAULT_HELDOUT_COUNTS, DEFAULT_TRAIN_COUNTS, WorldConfig
from .diffusion import DiffusionSchedule, GeneratorConfig
from .dpo import DpoConfig
from .grpo import GrpoConfig
from .policy import PolicyConfig
from .records import TaskKind
from .rewards import RewardConfig


class ConfigError(ValueError):
    """The configuration file is unreadable or contains invalid settings."""


def _stage1_grpo() -> GrpoConfig:
    return GrpoConfig(learning_rate=0.2, lr_schedule="linear")


def _stage2_grpo() -> GrpoConfig:
    return GrpoConfig(learning_rate=0.2, lr_schedule="linear", epochs=8)


def _default_mix() -> dict[str, float]:
    return {
        TaskKind.NATURAL_VIDEO_SCORE.value: 1.0,
        TaskKind.VIDEO_MULTIDIM.value: 1.0,
        TaskKind.PAIR.value: 1.0,
        TaskKind.VQA.value: 0.5,
    }


@dataclass
class DataPlan:
    train: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TRAIN_COUNTS))
    heldout: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_HELDOUT_COUNTS))


@dataclass
class Stage1Plan:
    grpo: GrpoConfig = field(default_factory=_stage1_grpo)
    reward: RewardConfig = field(default_factory=RewardConfig)


@dataclass
class Stage2Plan:
    grpo: GrpoConfig = field(default_factory=_stage2_grpo)
    reward: RewardConfig = field(default_factory=RewardConfig)
    mix: dict[str, float] = field(default_factory=_default_mix)
    steps_per_epoch: Optional[int] = None


@dataclass
class Stage3Plan:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    dpo: DpoConfig = field(default_factory=lambda: DpoConfig(learning_rate=0.003, steps=200, minibatch=8))
    judge_grpo: GrpoConfig = field(default_factory=_stage2_grpo)
    judge_reward: RewardConfig = field(default_factory=RewardConfig)
    prompts: int = 32
    pool_size: int = 10
    rounds: int = 2
    pretrain_steps: int = 1500
    pretrain_batch: int = 64
    pretrain_lr: float = 0.05

    def __post_init__(self) -> None:
        if self.pool_size < 2:
            raise ValueError("pool_size must be at least 2")
        if self.prompts < 1:
            raise ValueError("stage 3 needs at least one prompt")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")


@dataclass
class Ablations:
    warmup: bool = True
    tmr: bool = True
    lcr: bool = True
    uf: bool = True


@dataclass
class StagePlan:
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataPlan = field(default_factory=DataPlan)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    stage1: Stage1Plan = field(default_factory=Stage1Plan)
    stage2: Stage2Plan = field(default_factory=Stage2Plan)
    stage3: Stage3Plan = field(default_factory=Stage3Plan)
    ablations: Ablations = field(default_factory=Ablations)

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if callable(value) and not dataclasses.is_dataclass(value):
                continue  # hooks such as DpoConfig.weight_fn are code, not configuration
            out[f.name] = _to_plain(value)
        return out
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _merge(base, values: Any, where: str):
    """Copy of dataclass ``base`` with ``values`` applied, recursing into nested sections."""
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(base)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    changes = {}
    for name, value in values.items():
        current = getattr(base, name)
        if dataclasses.is_dataclass(current):
            changes[name] = _merge(current, value, f"{where}.{name}")
        else:
            changes[name] = value
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid settings in [{where}]: {exc}") from exc


def plan_from_dict(values: dict) -> StagePlan:
    plan = _merge(StagePlan(), values, "root")
    for key in plan.stage2.mix:
        try:
            TaskKind(key)
        except ValueError:
            raise ConfigError(f"unknown task kind in [stage2.mix]: {key}") from None
    for section in (plan.data.train, plan.data.heldout):
        for key, n in section.items():
            try:
                TaskKind(key)
            except ValueError:
                raise ConfigError(f"unknown task kind in [data]: {key}") from None
            if not isinstance(n, int) or n < 0:
                raise ConfigError(f"dataset count for {key} must be a non-negative integer")
    return plan


def load_plan(path: Optional[Path]) -> StagePlan:
    """Plan from a TOML file; ``None`` yields the defaults."""
    if path is None:
        return StagePlan()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return plan_from_dict(values)
