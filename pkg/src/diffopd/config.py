"""Experiment configuration: strict TOML schema with typed sections."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, OPDError
from .flowmatch import PretrainConfig
from .net import MLPArch
from .opd_trainer import DistillConfig, SftConfig
from .rl_teacher import RlConfig
from .schedule import DEFAULT_T_CLAMP_MAX, Schedule, make_uniform_schedule
from .tasks import RewardWidths, builtin_task_suite


@dataclass(frozen=True)
class ScheduleSection:
    n_steps: int = 20
    t_clamp_max: float = DEFAULT_T_CLAMP_MAX

    def build(self) -> Schedule:
        return make_uniform_schedule(self.n_steps, 0.0, self.t_clamp_max)


@dataclass(frozen=True)
class NetSection:
    hidden: tuple = (64, 64, 64)
    activation: str = "silu"
    n_freq: int = 4


@dataclass(frozen=True)
class TasksSection:
    type: str = "ring8"
    rewards: tuple = ("upper", "ring", "east")
    radius: float = 2.0
    std: float = 0.15
    upper_scale: float = 0.1
    ring_width: float = 0.25
    east_width: float = 0.3


@dataclass(frozen=True)
class EvalSection:
    n: int = 2048
    curve_n: int = 512
    every: int = 20


@dataclass(frozen=True)
class VarianceSection:
    n_samples: int = 100_000
    state: tuple = (0.5, -0.3)
    step: int = 8
    task: int = 2
    noise_level: float = 0.7


@dataclass(frozen=True)
class SweepSection:
    noise_levels: tuple = (0.0, 0.1, 0.7)
    loss_noise_level: float = 0.7
    seeds: int = 8
    budget: int = 0
    loss_budget: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    d: int = 2
    out_dir: str = ""
    schedule: ScheduleSection = ScheduleSection()
    net: NetSection = NetSection()
    tasks: TasksSection = TasksSection()
    pretrain: PretrainConfig = PretrainConfig()
    rl: RlConfig = RlConfig()
    distill: DistillConfig = DistillConfig()
    sft: SftConfig = SftConfig()
    eval: EvalSection = EvalSection()
    variance: VarianceSection = VarianceSection()
    sweep: SweepSection = SweepSection()

    # -- derived objects ------------------------------------------------------

    def arch(self) -> MLPArch:
        return MLPArch(d=self.d, cond_vocab=len(self.tasks.rewards), hidden=tuple(self.net.hidden),
                       activation=self.net.activation, n_freq=self.net.n_freq)

    def task_suite(self) -> list:
        t = self.tasks
        if t.type != "ring8":
            raise ConfigError(f"unknown task suite type {t.type!r}; only 'ring8' is built in")
        widths = RewardWidths(t.upper_scale, t.ring_width, t.east_width)
        return builtin_task_suite(self.d, tuple(t.rewards), t.radius, t.std, widths)

    def base_schedule(self) -> Schedule:
        return self.schedule.build()

    def distill_budget(self) -> int:
        """Student forward evaluations of the configured distillation run."""
        per_row = 3 if self.distill.loss_mode == "ppo_surrogate" else 2
        return (self.distill.rounds * len(self.tasks.rewards) * self.distill.batch
                * self.schedule.n_steps * per_row)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        data = self.to_dict()
        data.pop("out_dir")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    proto = cls()
    kwargs = {}
    for k, v in data.items():
        default = getattr(proto, k)
        if default is None:
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{where}.{k}: expected an integer, got {v!r}")
            kwargs[k] = v
        else:
            kwargs[k] = _coerce(v, default, f"{where}.{k}")
    try:
        return cls(**kwargs)
    except OPDError as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    top = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - set(top))
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    proto = ExperimentConfig()
    kwargs = {}
    for k, v in data.items():
        default = getattr(proto, k)
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build_section(type(default), v, k)
        else:
            kwargs[k] = _coerce(v, default, k)
    cfg = ExperimentConfig(**kwargs)
    if cfg.d < 2:
        raise ConfigError("d must be >= 2 for the ring task suite")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def reference_config_path() -> Path:
    return Path(__file__).with_name("configs") / "reference.toml"
