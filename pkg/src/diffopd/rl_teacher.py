"""Single-task (and round-robin multi-task) RL fine-tuning of a velocity field.

Group-relative policy gradient on the per-step Gaussian transition policy: the
terminal reward of each SDE rollout is normalised within its group and
broadcast to every step, and the clipped PPO surrogate is applied to the
per-step log-densities.  One optimizer update per rollout batch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .errors import InvalidArgument, NumericError
from .net import VelocityField, grad_scalar_loss, save_checkpoint
from .objectives import clipped_surrogate, step_means
from .optim import Adam
from .rng import child
from .sampler import log_transition_density, rollout
from .schedule import Schedule


@dataclass(frozen=True)
class RlConfig:
    group_size: int = 32
    groups: int = 2
    lr: float = 1e-3
    clip_eps: float = 0.2
    noise_level: float = 0.7
    iterations: int = 300
    beta: float = 0.0
    ppo_epochs: int = 1

    def __post_init__(self):
        if self.group_size < 2:
            raise InvalidArgument("group_size must be >= 2")
        if not self.noise_level > 0:
            raise InvalidArgument("RL needs a stochastic policy (noise_level > 0)")
        if self.groups < 1 or self.iterations < 0 or self.ppo_epochs < 1:
            raise InvalidArgument(f"bad RL config {self}")

    @property
    def rollouts(self) -> int:
        return self.group_size * self.groups


def group_advantage(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[-1] < 2:
        raise InvalidArgument("group advantage needs at least 2 rewards")
    mean = r.mean(axis=-1, keepdims=True)
    std = r.std(axis=-1, keepdims=True)
    return (r - mean) / np.maximum(std, 1e-6)


def _log_probs(vf, traj, var):
    mu = step_means(vf, traj.states[:-1], traj.cond, traj.schedule)
    return ad.stack([log_transition_density(mu[j], float(var[j]), traj.states[j + 1])
                     for j in range(traj.n_steps)])


def _kl_to_ref(vf, ref, traj, var):
    mu = step_means(vf, traj.states[:-1], traj.cond, traj.schedule)
    mu_ref = step_means(ref, traj.states[:-1], traj.cond, traj.schedule)
    return ad.square_norm(mu - mu_ref) / (2.0 * var[:, None])


@dataclass
class Batch:
    task_id: int
    traj: object
    advantages: np.ndarray
    logp_old: np.ndarray
    mean_reward: float


def collect(vf: VelocityField, task, cfg: RlConfig, sched: Schedule,
            rng: np.random.Generator) -> Batch:
    """Roll out ``cfg.rollouts`` SDE trajectories on ``task`` and score them."""
    traj = rollout(vf, sched, task.id, rng, n=cfg.rollouts)
    rewards = task.reward(traj.final)
    adv = group_advantage(rewards.reshape(cfg.groups, cfg.group_size)).reshape(-1)
    logp_old = _log_probs(vf, traj, sched.variances())
    return Batch(task.id, traj, adv, logp_old, float(rewards.mean()))


def surrogate_loss(s, batch: Batch, cfg: RlConfig, ref=None):
    """Negative clipped surrogate, averaged over steps and rollouts."""
    sched = batch.traj.schedule
    var = sched.variances()
    logp = _log_probs(s, batch.traj, var)
    ratio = ad.exp(logp - batch.logp_old)
    adv = batch.advantages[None, :]
    surr = clipped_surrogate(ratio, adv, cfg.clip_eps)
    loss = -surr.mean()
    if cfg.beta > 0 and ref is not None:
        loss = loss + cfg.beta * _kl_to_ref(s, ref, batch.traj, var).mean()
    return loss


def clip_fraction(vf, batch: Batch, cfg: RlConfig) -> float:
    logp = _log_probs(vf, batch.traj, batch.traj.schedule.variances())
    ratio = np.exp(logp - batch.logp_old)
    return float((np.abs(ratio - 1.0) > cfg.clip_eps).mean())


def rl_train(init: VelocityField, tasks, cfg: RlConfig, sched: Schedule, rng: np.random.Generator,
             metrics=None, label: str = "rl", abort_path=None, start_iter: int = 0,
             max_fwd_evals: int | None = None):
    """Round-robin RL over ``tasks``; one optimizer step per iteration on the task-averaged loss.

    ``metrics(row)`` receives one dict per (iteration, task).  Returns the
    trained field and the total number of student forward evaluations.
    """
    sched = sched.with_noise(cfg.noise_level)
    vf = init.copy()
    ref = init.copy() if cfg.beta > 0 else None
    opt = Adam(vf.arch.n_params, lr=cfg.lr)
    streams = {task.id: child(rng, "task", task.id) for task in tasks}
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batches = [collect(vf, task, cfg, sched, streams[task.id]) for task in tasks]
        for _ in range(cfg.ppo_epochs):
            grad = np.zeros(vf.arch.n_params)
            losses = []
            for b in batches:
                try:
                    res = grad_scalar_loss(vf, lambda s: surrogate_loss(s, b, cfg, ref),
                                           context=f"{label} iter {it} task {b.task_id}")
                except NumericError:
                    if abort_path is not None:
                        save_checkpoint(vf, abort_path)
                    raise
                grad += res.grad
                losses.append(res.value)
            opt.step(vf.params, grad / len(batches))
        if metrics is not None:
            elapsed = time.perf_counter() - start
            for b, loss in zip(batches, losses):
                metrics({"iter": start_iter + it, "task": b.task_id, "mean_reward": b.mean_reward,
                         "loss": loss, "fwd_evals": vf.fwd_evals, "wallclock_s": elapsed})
        if max_fwd_evals is not None and vf.fwd_evals >= max_fwd_evals:
            break
    return vf, vf.fwd_evals


def train_teacher(base: VelocityField, task, cfg: RlConfig, sched: Schedule,
                  rng: np.random.Generator, metrics=None, abort_path=None) -> VelocityField:
    vf, _ = rl_train(base, [task], cfg, sched, rng, metrics=metrics,
                     label=f"teacher {task.name}", abort_path=abort_path)
    return vf
