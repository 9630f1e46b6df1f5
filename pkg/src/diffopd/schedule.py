"""Time grid and noise-schedule scalars for the reverse-time sampler.

Time runs backwards from ``t_0 = 1`` (pure noise) to ``t_N = 0`` (data), so every
step size ``dt_j = t_{j+1} - t_j`` is negative.  The SDE diffusion coefficient is
``sigma_t = a * sqrt(t / (1 - t))``; it has a pole at ``t = 1`` which is removed
by clamping ``t`` to ``t_clamp_max`` before forming the ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

DEFAULT_T_CLAMP_MAX = 0.9


@dataclass(frozen=True)
class Schedule:
    times: tuple
    noise_level: float = 0.0
    t_clamp_max: float = DEFAULT_T_CLAMP_MAX

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if len(ts) < 2:
            raise InvalidArgument("schedule needs at least one step")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise InvalidArgument(f"schedule must run from 1 to 0, got {ts[0]} .. {ts[-1]}")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise InvalidArgument("schedule times must be strictly decreasing")
        if not self.noise_level >= 0.0:
            raise InvalidArgument(f"noise_level must be >= 0, got {self.noise_level}")
        if not 0.0 < self.t_clamp_max < 1.0:
            raise InvalidArgument(f"t_clamp_max must lie in (0, 1), got {self.t_clamp_max}")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dts(self) -> tuple:
        ts = self.times
        return tuple(ts[j + 1] - ts[j] for j in range(len(ts) - 1))

    @property
    def steps(self) -> list:
        """``[(t_j, dt_j), ...]`` for ``j = 0 .. N-1``."""
        return list(zip(self.times[:-1], self.dts))

    @property
    def is_uniform(self) -> bool:
        return self.times == make_uniform_schedule(self.n_steps).times

    def sigma(self, t: float) -> float:
        return sigma_t(self, t)

    def variance(self, j: int) -> float:
        return step_variance(self, j)

    def variances(self) -> np.ndarray:
        return np.array([step_variance(self, j) for j in range(self.n_steps)])

    def with_noise(self, noise_level: float) -> "Schedule":
        return Schedule(self.times, float(noise_level), self.t_clamp_max)

    def to_dict(self) -> dict:
        out = {
            "n_steps": self.n_steps,
            "noise_level": self.noise_level,
            "t_clamp_max": self.t_clamp_max,
        }
        if not self.is_uniform:
            out["times"] = list(self.times)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Schedule":
        known = {"n_steps", "noise_level", "t_clamp_max", "times"}
        extra = set(data) - known
        if extra:
            raise InvalidArgument(f"unknown schedule keys: {sorted(extra)}")
        noise = float(data.get("noise_level", 0.0))
        clamp = float(data.get("t_clamp_max", DEFAULT_T_CLAMP_MAX))
        if "times" in data:
            sched = cls(tuple(data["times"]), noise, clamp)
            if "n_steps" in data and int(data["n_steps"]) != sched.n_steps:
                raise InvalidArgument("n_steps disagrees with explicit times")
            return sched
        return make_uniform_schedule(int(data["n_steps"]), noise, clamp)


def make_uniform_schedule(n_steps: int, noise_level: float = 0.0,
                          t_clamp_max: float = DEFAULT_T_CLAMP_MAX) -> Schedule:
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgument(f"n_steps must be a positive integer, got {n_steps!r}")
    n = int(n_steps)
    return Schedule(tuple(1.0 - j / n for j in range(n + 1)), float(noise_level), t_clamp_max)


def sigma_t(sched: Schedule, t: float) -> float:
    a = sched.noise_level
    if a == 0.0:
        return 0.0
    tc = min(float(t), sched.t_clamp_max)
    return a * math.sqrt(tc / (1.0 - tc))


def step_variance(sched: Schedule, j: int) -> float:
    """Per-step kernel variance ``sigma_{t_j}^2 * (-dt_j)``."""
    if not 0 <= j < sched.n_steps:
        raise InvalidArgument(f"step index {j} out of range [0, {sched.n_steps})")
    s = sigma_t(sched, sched.times[j])
    return s * s * -(sched.times[j + 1] - sched.times[j])
