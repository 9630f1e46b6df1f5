"""Distillation and policy-gradient losses on recorded trajectories.

All losses evaluate the student's kernel means at the *stored* states of an
on-policy trajectory batch, so the rollout itself never carries a gradient tape.
Teacher means are plain arrays (constants).  Pass a
:class:`~diffopd.net.Tracked` student to get a differentiable scalar, or a
plain :class:`~diffopd.net.VelocityField` to get a float.

Per-trajectory losses are sums over steps (``step_reduce="sum"``) or means over
steps (``"mean"``); the batch dimension is always averaged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .errors import InvalidArgument
from .net import ParamGradient, grad_scalar_loss
from .sampler import Trajectory, log_transition_density, mean_coefficients
from .schedule import Schedule

LOSS_MODES = ("closed_form_kl", "ppo_surrogate", "ode_l2")


@dataclass(frozen=True)
class StepLossTerm:
    j: int
    kl: float
    ratio: float = 1.0
    advantage: float = 0.0


def clipped_surrogate(ratio, adv, clip_eps: float):
    """Elementwise ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    return ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def gaussian_kl_same_cov(mu1, mu2, var: float):
    """KL(N(mu1, var I) || N(mu2, var I)), reduced over the last axis."""
    if not var > 0.0:
        raise InvalidArgument(f"variance must be > 0, got {var}")
    return ad.square_norm(mu1 - mu2) / (2.0 * var)


def mc_kl_oracle(mu1, mu2, var: float, n_samples: int, rng: np.random.Generator,
                 chunk: int = 200_000):
    """Monte-Carlo estimate of the same-covariance KL: ``(estimate, stderr)``."""
    if n_samples < 1000:
        raise InvalidArgument("n_samples must be >= 1000")
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    sd = math.sqrt(var)
    total = total_sq = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x = mu1 + sd * rng.standard_normal((m, mu1.size))
        # log p1(x) - log p2(x); normalisers cancel
        lr = (((x - mu2) ** 2).sum(axis=1) - ((x - mu1) ** 2).sum(axis=1)) / (2.0 * var)
        total += lr.sum()
        total_sq += (lr * lr).sum()
        done += m
    mean = total / n_samples
    var_hat = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(var_hat / n_samples)


# -- batched kernel means ---------------------------------------------------------

def step_means(vf, states: np.ndarray, cond: np.ndarray, sched: Schedule):
    """Kernel means at ``states[j]`` for every step ``j``: shape ``(N, B, d)``.

    ``states`` holds ``x_{t_0} .. x_{t_{N-1}}`` (the last state is not needed).
    One forward call covers all steps.
    """
    n, b, d = states.shape
    if n != sched.n_steps:
        raise InvalidArgument(f"{n} states for a {sched.n_steps}-step schedule")
    coef = np.array([mean_coefficients(sched, j) for j in range(n)])
    cx = coef[:, 0][:, None, None]
    cv = coef[:, 1][:, None, None]
    ts = np.repeat(np.asarray(sched.times[:-1]), b)
    cs = np.tile(np.asarray(cond), n)
    v = vf.forward(states.reshape(n * b, d), ts, cs).reshape(n, b, d)
    return cx * states + cv * v


def _reduce(per_step, step_reduce: str):
    # per_step: (N, B) -> scalar
    if step_reduce == "sum":
        per_traj = per_step.sum(axis=0)
    elif step_reduce == "mean":
        per_traj = per_step.mean(axis=0)
    else:
        raise InvalidArgument(f"step_reduce must be 'sum' or 'mean', got {step_reduce!r}")
    return per_traj.mean()


def _prepare(traj: Trajectory, sched: Schedule | None, c):
    sched = traj.schedule if sched is None else sched
    if sched.n_steps != traj.n_steps:
        raise InvalidArgument("schedule does not match trajectory length")
    cond = traj.cond if c is None else np.broadcast_to(np.asarray(c), (traj.batch,))
    return sched, cond, traj.states[:-1]


def step_kl(student, teacher, traj: Trajectory, sched: Schedule | None = None, c=None):
    """Per-step, per-sample closed-form KL, shape ``(N, B)``."""
    sched, cond, xs = _prepare(traj, sched, c)
    if not sched.noise_level > 0:
        raise InvalidArgument("closed-form KL needs noise level > 0; use opd_ode_loss for a = 0")
    mu_s = step_means(student, xs, cond, sched)
    mu_t = step_means(teacher, xs, cond, sched)
    var = sched.variances()[:, None]
    return ad.square_norm(mu_s - mu_t) / (2.0 * var)


def opd_sde_loss(student, teacher, traj: Trajectory, sched: Schedule | None = None, c=None,
                 step_reduce: str = "sum"):
    """On-policy reverse-KL distillation loss for the stochastic sampler."""
    return _reduce(step_kl(student, teacher, traj, sched, c), step_reduce)


def step_l2(student, teacher, traj: Trajectory, sched: Schedule | None = None, c=None):
    """Per-step, per-sample ``0.5 * ||mu_S - mu_T||^2``, shape ``(N, B)``."""
    sched, cond, xs = _prepare(traj, sched, c)
    mu_s = step_means(student, xs, cond, sched)
    mu_t = step_means(teacher, xs, cond, sched)
    return 0.5 * ad.square_norm(mu_s - mu_t)


def opd_ode_loss(student, teacher, traj: Trajectory, sched: Schedule | None = None, c=None,
                 step_reduce: str = "sum"):
    """On-policy transition matching for the deterministic sampler."""
    sched = traj.schedule if sched is None else sched
    if sched.noise_level != 0.0:
        raise InvalidArgument("opd_ode_loss requires noise level 0; use opd_sde_loss for a > 0")
    return _reduce(step_l2(student, teacher, traj, sched, c), step_reduce)


def ppo_surrogate_loss(student, snapshot, teacher, traj: Trajectory, sched: Schedule | None = None,
                       c=None, clip_eps: float = 0.2, step_reduce: str = "sum",
                       return_terms: bool = False):
    """Clipped PPO surrogate with per-step advantage ``A_j = -KL_j``.

    ``snapshot`` is the field that generated ``traj`` (the old policy).  The
    gradient flows through both the ratio and the KL advantage.
    """
    if not clip_eps > 0:
        raise InvalidArgument(f"clip_eps must be > 0, got {clip_eps}")
    sched, cond, xs = _prepare(traj, sched, c)
    if not (sched.noise_level > 0 and traj.is_sde):
        raise InvalidArgument("PPO surrogate needs a stochastic (a > 0) trajectory")
    var = sched.variances()[:, None]
    actions = traj.states[1:]
    mu_s = step_means(student, xs, cond, sched)
    mu_old = step_means(snapshot, xs, cond, sched)
    mu_t = step_means(teacher, xs, cond, sched)
    logp = _log_density_steps(mu_s, var, actions)
    logp_old = _log_density_steps(mu_old, var, actions)
    ratio = ad.exp(logp - logp_old)
    delta = ad.square_norm(mu_s - mu_t) / (2.0 * var)
    adv = -delta
    surr = clipped_surrogate(ratio, adv, clip_eps)
    loss = _reduce(-surr, step_reduce)
    if not return_terms:
        return loss
    r, a = ad.value(ratio), ad.value(adv)
    terms = [StepLossTerm(j, float(-a[j].mean()), float(r[j].mean()), float(a[j].mean()))
             for j in range(sched.n_steps)]
    return loss, terms


def _log_density_steps(mu, var_col, actions):
    # var differs per step, so evaluate step by step and restack
    return ad.stack([log_transition_density(mu[j], float(var_col[j, 0]), actions[j])
                     for j in range(var_col.shape[0])])


def score_function_term(student, traj: Trajectory, sched: Schedule | None, c, j: int,
                        teacher=None, delta=None) -> ParamGradient:
    """Batch mean of ``Delta_j * (eps_j . grad mu_S) / sigma_bar_j``.

    ``Delta_j`` is taken from ``delta`` (shape ``(B,)``) when given, otherwise
    computed against ``teacher``.
    """
    sched, cond, xs = _prepare(traj, sched, c)
    if not (sched.noise_level > 0 and traj.is_sde):
        raise InvalidArgument("score-function term needs a stochastic (a > 0) trajectory")
    var = sched.variances()[j]
    if delta is None:
        if teacher is None:
            raise InvalidArgument("need either a teacher or explicit delta values")
        delta = ad.value(step_kl(student, teacher, traj, sched, c))[j]
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (traj.batch,))
    eps = traj.noises[j]
    sd = math.sqrt(var)
    t = sched.times[j]
    cx, cv = mean_coefficients(sched, j)

    def closure(s):
        mu = cx * xs[j] + cv * s.forward(xs[j], t, cond)
        return ((mu * eps).sum(axis=-1) * (delta / sd)).mean()

    return grad_scalar_loss(student, closure, context=f"score term j={j}")


def distill_loss(mode: str, student, teacher, traj: Trajectory, snapshot=None,
                 clip_eps: float = 0.2, step_reduce: str = "sum"):
    """Dispatch on ``mode`` in :data:`LOSS_MODES`."""
    if mode == "closed_form_kl":
        return opd_sde_loss(student, teacher, traj, step_reduce=step_reduce)
    if mode == "ode_l2":
        return opd_ode_loss(student, teacher, traj, step_reduce=step_reduce)
    if mode == "ppo_surrogate":
        if snapshot is None:
            raise InvalidArgument("ppo_surrogate needs the rollout-parameter snapshot")
        return ppo_surrogate_loss(student, snapshot, teacher, traj, clip_eps=clip_eps,
                                  step_reduce=step_reduce)
    raise InvalidArgument(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
