"""Synthetic targets, bounded task rewards and evaluation.

The shared base distribution is an 8-mode Gaussian ring in the first two
coordinates (remaining coordinates, if any, are centred at 0).  Modes sit at
angles ``(k + 1/2) * 45deg`` so the ring has no mode on either axis.  Three rewards
pull the model in different directions:

* ``upper`` -- sigmoid of ``x_2 / scale``; prefers the upper half-plane.
* ``ring``  -- Gaussian bump in ``|r - R|``; prefers the ring itself, tightly.
* ``east``  -- bump around the two modes with the largest ``x_1``; these two
  straddle the horizontal axis, so ``upper`` and ``east`` conflict on one of them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument
from .sampler import sample

N_MODES = 8


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    centers: np.ndarray
    std: float

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        if n < 1:
            raise InvalidArgument(f"n must be >= 1, got {n}")
        labels = rng.integers(0, len(self.centers), size=n)
        x = self.centers[labels] + self.std * rng.standard_normal((n, self.d))
        return (x, labels) if return_labels else x

    def second_moment(self) -> float:
        """``E ||x||^2`` under the mixture."""
        return float((self.centers ** 2).sum(axis=1).mean() + self.d * self.std ** 2)


def ring_mixture(d: int = 2, radius: float = 2.0, std: float = 0.15) -> MixtureSpec:
    if d < 2:
        raise InvalidArgument("the ring needs d >= 2")
    ang = 2 * np.pi * (np.arange(N_MODES) + 0.5) / N_MODES
    centers = np.zeros((N_MODES, d))
    centers[:, 0] = radius * np.cos(ang)
    centers[:, 1] = radius * np.sin(ang)
    return MixtureSpec(centers, std)


# -- rewards ---------------------------------------------------------------------

def upper_reward(scale: float = 0.1):
    def reward(x):
        return 0.5 * (1.0 + np.tanh(np.asarray(x)[..., 1] / (2.0 * scale)))
    return reward


def ring_reward(radius: float = 2.0, width: float = 0.25):
    def reward(x):
        r = np.linalg.norm(np.asarray(x)[..., :2], axis=-1)
        return np.exp(-0.5 * ((r - radius) / width) ** 2)
    return reward


def east_reward(centers: np.ndarray, width: float = 0.3, n_targets: int = 2):
    targets = centers[np.argsort(-centers[:, 0], kind="stable")[:n_targets]]

    def reward(x):
        x = np.asarray(x)
        miss = np.ones(x.shape[:-1])
        for m in targets:
            bump = np.exp(-0.5 * ((x - m) ** 2).sum(axis=-1) / width ** 2)
            miss = miss * (1.0 - bump)
        return 1.0 - miss

    reward.targets = targets
    return reward


@dataclass(frozen=True, eq=False)
class Task:
    id: int
    name: str
    target: MixtureSpec
    reward: Callable = field(repr=False)
    description: str = ""


@dataclass(frozen=True)
class RewardWidths:
    upper_scale: float = 0.1
    ring_width: float = 0.25
    east_width: float = 0.3


def builtin_task_suite(d: int = 2, rewards=("upper", "ring", "east"), radius: float = 2.0,
                       std: float = 0.15, widths: RewardWidths = RewardWidths()) -> list:
    target = ring_mixture(d, radius, std)
    makers = {
        "upper": (lambda: upper_reward(widths.upper_scale),
                  "samples in the upper half-plane"),
        "ring": (lambda: ring_reward(radius, widths.ring_width),
                 "samples tightly on the ring"),
        "east": (lambda: east_reward(target.centers, widths.east_width),
                 "samples at the two easternmost modes"),
    }
    tasks = []
    for i, name in enumerate(rewards):
        if name not in makers:
            raise InvalidArgument(f"unknown reward {name!r}; expected one of {sorted(makers)}")
        make, desc = makers[name]
        tasks.append(Task(i, name, target, make(), desc))
    return tasks


def sample_target(task: Task, n: int, rng: np.random.Generator) -> np.ndarray:
    return task.target.sample(n, rng)


# -- evaluation ------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    task_id: int
    mean_reward: float
    coverage: float
    near_mode: float
    n: int

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "mean_reward": self.mean_reward,
                "coverage": self.coverage, "near_mode": self.near_mode, "n": self.n}


def mode_stats(x: np.ndarray, target: MixtureSpec, radius: float = 0.5) -> tuple:
    """``(coverage, near_mode)`` of samples ``x``.

    ``near_mode`` is the fraction of samples within ``radius`` of some mode;
    ``coverage`` is the fraction of modes holding at least a quarter of their
    fair share (``n / (4K)``) of such samples.
    """
    dist = np.linalg.norm(x[:, None, :] - target.centers[None], axis=-1)
    nearest = dist.argmin(axis=1)
    close = dist.min(axis=1) <= radius
    k = len(target.centers)
    counts = np.bincount(nearest[close], minlength=k)
    coverage = float((counts >= len(x) / (4.0 * k)).mean())
    return coverage, float(close.mean())


def evaluate(vf, task: Task, sched_eval, n: int, rng: np.random.Generator,
             cond: int | None = None) -> EvalReport:
    """Mean reward and mode statistics of ``n`` deterministic (ODE) samples.

    Samples are drawn under condition ``cond`` (default: the task's own label)
    and scored with ``task``'s reward.
    """
    if sched_eval.noise_level != 0.0:
        raise InvalidArgument("evaluation uses the deterministic sampler (noise level 0)")
    x = sample(vf, sched_eval, task.id if cond is None else cond, rng, n)
    r = task.reward(x)
    coverage, near = mode_stats(x, task.target)
    return EvalReport(task.id, float(r.mean()), coverage, near, n)


def reward_base_rate(task: Task, n: int, rng: np.random.Generator) -> float:
    """Mean reward of standard-normal samples (an untrained, identity-like sampler)."""
    return float(task.reward(rng.standard_normal((n, task.target.d))).mean())
