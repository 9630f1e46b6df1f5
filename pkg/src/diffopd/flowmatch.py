"""Conditional flow-matching regression (pretraining and SFT-style distillation).

Interpolant ``x_t = (1 - t) x_0 + t x_1`` with data ``x_0`` and noise
``x_1 ~ N(0, I)``; the regression target is ``x_1 - x_0``, so integrating
``dx = v dt`` from ``t = 1`` down to ``t = 0`` moves noise to data.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .errors import NumericError
from .net import MLPArch, VelocityField, grad_scalar_loss
from .optim import Adam


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 8000
    batch: int = 512
    lr: float = 3e-3
    lr_final: float = 1e-4


def fm_loss(vf, x0: np.ndarray, x1: np.ndarray, t: np.ndarray, c):
    """Mean over the batch of ``||v(x_t, t, c) - (x_1 - x_0)||^2``."""
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    v = vf.forward(xt, t, c)
    return ad.square_norm(v - (x1 - x0)).mean()


def optimal_velocity(target, x: np.ndarray, t) -> np.ndarray:
    """Minimiser of the flow-matching loss for a Gaussian-mixture ``target``.

    ``E[x_1 - x_0 | x_t = x]`` in closed form: given component ``k`` (mean
    ``m_k``, std ``s``), ``x_t ~ N((1-t) m_k, V I)`` with
    ``V = (1-t)^2 s^2 + t^2``, and the conditional mean of the target is
    ``-m_k + (t - (1-t) s^2) / V * (x - (1-t) m_k)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))[:, None]
    m = target.centers[None]
    s2 = target.std ** 2
    var = (1.0 - t) ** 2 * s2 + t ** 2
    resid = x[:, None, :] - (1.0 - t)[..., None] * m
    logw = -0.5 * (resid ** 2).sum(axis=-1) / var
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    cond = -m + ((t - (1.0 - t) * s2) / var)[..., None] * resid
    return (w[..., None] * cond).sum(axis=1)


def fm_loss_floor(target, n: int, rng: np.random.Generator) -> tuple:
    """Monte-Carlo ``(estimate, stderr)`` of the smallest achievable flow-matching loss."""
    x0 = target.sample(n, rng)
    x1 = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, size=n)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    err = ((optimal_velocity(target, xt, t) - (x1 - x0)) ** 2).sum(axis=1)
    return float(err.mean()), float(err.std(ddof=1) / math.sqrt(n))


def cosine_lr(cfg_lr: float, lr_final: float, step: int, total: int) -> float:
    frac = step / max(total - 1, 1)
    return lr_final + 0.5 * (cfg_lr - lr_final) * (1.0 + math.cos(math.pi * frac))


def pretrain(arch: MLPArch, tasks, cfg: PretrainConfig, rng: np.random.Generator,
             log=None) -> tuple:
    """Train the reference field on the task-conditional targets.

    Returns ``(vf, losses)``; ``log(step, loss, elapsed)`` is called every step
    if given.
    """
    vf = VelocityField.init(arch, rng)
    opt = Adam(arch.n_params, lr=cfg.lr)
    losses = []
    start = time.perf_counter()
    m = len(tasks)
    for step in range(cfg.steps):
        c = rng.integers(0, m, size=cfg.batch)
        x0 = np.empty((cfg.batch, arch.d))
        for task in tasks:
            idx = np.flatnonzero(c == task.id)
            if idx.size:
                x0[idx] = task.target.sample(idx.size, rng)
        x1 = rng.standard_normal((cfg.batch, arch.d))
        t = rng.uniform(0.0, 1.0, size=cfg.batch)
        res = grad_scalar_loss(vf, lambda s: fm_loss(s, x0, x1, t, c), context=f"pretrain {step}")
        opt.lr = cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps)
        opt.step(vf.params, res.grad)
        if not np.all(np.isfinite(vf.params)):
            raise NumericError("non-finite parameters", step=step)
        losses.append(res.value)
        if log is not None:
            log(step, res.value, time.perf_counter() - start)
    return vf, np.array(losses)
