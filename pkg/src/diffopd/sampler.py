"""One-step Gaussian transition kernels and batched rollouts.

A step from ``t_j`` to ``t_{j+1}`` (``dt_j < 0``) under velocity ``v`` is

    x' = cx_j * x + cv_j * v(x, t_j, c) + sqrt(var_j) * eps,
    cx_j = 1 + sigma_j^2 dt_j / (2 t_j),
    cv_j = (1 + sigma_j^2 (1 - t_j) / (2 t_j)) * dt_j,

with ``var_j = sigma_j^2 (-dt_j)``.  With noise level 0 this is exactly the
Euler step ``x + dt_j * v``.  Functions taking a velocity field accept either a
:class:`~diffopd.net.VelocityField` or a :class:`~diffopd.net.Tracked` view; in
the latter case the mean is a differentiable :class:`~diffopd.autograd.Tensor`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .errors import InvalidArgument, NumericError
from .schedule import Schedule, sigma_t, step_variance


def mean_coefficients(sched: Schedule, j: int) -> tuple:
    """``(cx_j, cv_j)`` such that the kernel mean is ``cx_j * x + cv_j * v``."""
    if not 0 <= j < sched.n_steps:
        raise InvalidArgument(f"step index {j} out of range [0, {sched.n_steps})")
    t = sched.times[j]
    dt = sched.times[j + 1] - t
    s2 = sigma_t(sched, t) ** 2
    return 1.0 + s2 / (2.0 * t) * dt, (1.0 + s2 * (1.0 - t) / (2.0 * t)) * dt


def transition_mean(vf, x, j: int, sched: Schedule, c):
    cx, cv = mean_coefficients(sched, j)
    v = vf.forward(x, sched.times[j], c)
    return cx * x + cv * v


def sde_step(vf, x, j: int, sched: Schedule, c, eps):
    mean = transition_mean(vf, x, j, sched, c)
    return mean + math.sqrt(step_variance(sched, j)) * eps


def ode_step(vf, x, j: int, sched: Schedule, c):
    """Plain Euler step; only meaningful for noise level 0."""
    t = sched.times[j]
    dt = sched.times[j + 1] - t
    return x + dt * vf.forward(x, t, c)


def log_transition_density(mu, var: float, a_next):
    """Isotropic Gaussian log-density, reduced over the last axis."""
    if not var > 0.0:
        raise InvalidArgument("transition variance must be > 0 (deterministic kernels have no density)")
    d = np.shape(ad.value(a_next))[-1]
    diff = a_next - mu
    return -0.5 * d * math.log(2.0 * math.pi * var) - ad.square_norm(diff) / (2.0 * var)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A batch of rollouts.

    ``states`` has shape ``(N+1, B, d)``; ``noises`` has shape ``(N, B, d)`` for
    SDE rollouts and ``(0, B, d)`` for ODE rollouts; ``cond`` has shape ``(B,)``.
    """
    states: np.ndarray
    noises: np.ndarray
    cond: np.ndarray
    schedule: Schedule

    def __post_init__(self):
        for arr in (self.states, self.noises, self.cond):
            arr.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def batch(self) -> int:
        return self.states.shape[1]

    @property
    def is_sde(self) -> bool:
        return self.noises.shape[0] == self.n_steps and self.n_steps > 0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for b in range(self.batch):
                for j in range(self.n_steps + 1):
                    row = {
                        "sample": b,
                        "step": j,
                        "t": self.schedule.times[j],
                        "cond": int(self.cond[b]),
                        "state": self.states[j, b].tolist(),
                        "noise": self.noises[j, b].tolist()
                        if self.is_sde and j < self.n_steps else None,
                    }
                    fh.write(json.dumps(row) + "\n")


def _as_field(vf):
    # rollouts never record gradients
    return getattr(vf, "vf", vf)


def rollout(vf, sched: Schedule, c, rng: np.random.Generator, n: int = 1,
            record: bool = True, method: str = "auto") -> Trajectory:
    """Sample ``n`` trajectories from ``x_{t_0} ~ N(0, I)``.

    ``method`` is ``"sde"``, ``"ode"`` or ``"auto"`` (ODE iff the noise level is
    0).  With ``record=False`` only the initial and final states are kept.
    """
    vf = _as_field(vf)
    if method == "auto":
        method = "sde" if sched.noise_level > 0 else "ode"
    if method not in ("sde", "ode"):
        raise InvalidArgument(f"unknown rollout method {method!r}")
    if method == "ode" and sched.noise_level > 0:
        raise InvalidArgument("ODE rollouts require noise level 0")
    d = vf.arch.d
    cond = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
    x = rng.standard_normal((n, d))
    states = [x]
    noises = []
    for j in range(sched.n_steps):
        if method == "sde":
            eps = rng.standard_normal((n, d))
            x = sde_step(vf, x, j, sched, cond, eps)
            if record:
                noises.append(eps)
        else:
            x = ode_step(vf, x, j, sched, cond)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite state during rollout", step=j)
        if record:
            states.append(x)
    if not record:
        states.append(x)
    noise_arr = np.array(noises) if noises else np.zeros((0, n, d))
    return Trajectory(np.array(states), noise_arr, cond, sched)


def sample(vf, sched: Schedule, c, rng: np.random.Generator, n: int) -> np.ndarray:
    """Terminal states of ``n`` rollouts."""
    return rollout(vf, sched, c, rng, n, record=False).final


def replay(vf, traj: Trajectory) -> np.ndarray:
    """Recompute all states from ``x_{t_0}`` and the stored noises."""
    vf = _as_field(vf)
    sched = traj.schedule
    x = traj.states[0]
    out = [x]
    for j in range(traj.n_steps):
        if traj.is_sde:
            x = sde_step(vf, x, j, sched, traj.cond, traj.noises[j])
        else:
            x = ode_step(vf, x, j, sched, traj.cond)
        out.append(x)
    return np.array(out)
