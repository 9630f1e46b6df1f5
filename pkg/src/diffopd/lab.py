"""Measurement harness: gradient estimator statistics and training sweeps.

The estimator study holds the state ``x`` fixed and compares two gradients of
the same per-step objective:

* the pathwise gradient of ``Delta = KL(N(mu_S, s^2) || N(mu_T, s^2))``, which
  is deterministic given ``x``;
* the PPO-surrogate gradient at ratio 1, one sample per resampled action
  ``a = mu_S + s * eps``.  At ratio 1 it equals
  ``grad Delta + (Delta / s) * J^T eps`` with ``J = d mu_S / d theta``, so the
  per-sample gradients are affine in ``eps`` and their mean and variance can be
  streamed in chunks without storing ``n_samples x n_params`` numbers.

The affine form is cross-checked against reverse-mode differentiation of the
actual clipped surrogate by :func:`ppo_step_gradient`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ad
from .errors import InvalidArgument
from .net import VelocityField, grad_scalar_loss
from .objectives import clipped_surrogate, gaussian_kl_same_cov
from .opd_trainer import DistillConfig, EvalHook, distill
from .rng import child
from .sampler import log_transition_density, transition_mean
from .schedule import Schedule

MIN_ESTIMATOR_SAMPLES = 10_000


@dataclass
class GradientReport:
    estimator: str
    mean: np.ndarray = field(repr=False)
    variance: np.ndarray = field(repr=False)
    n_samples: int
    max_bias: float = 0.0
    stderr: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if np.any(self.variance < 0):
            raise InvalidArgument("coordinatewise variance must be >= 0")
        if self.stderr is None:
            self.stderr = np.sqrt(self.variance / max(self.n_samples, 1))

    @property
    def total_variance(self) -> float:
        return float(self.variance.sum())

    def max_z(self, reference: np.ndarray) -> float:
        """Largest ``|mean - reference| / stderr`` over coordinates with nonzero stderr."""
        diff = np.abs(self.mean - reference)
        ok = self.stderr > 0
        if np.any(diff[~ok] > 1e-12 * (1.0 + np.abs(reference[~ok]))):
            return math.inf
        return float((diff[ok] / self.stderr[ok]).max()) if ok.any() else 0.0

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "n_samples": self.n_samples,
                "max_bias": self.max_bias, "total_variance": self.total_variance,
                "mean_norm": float(np.linalg.norm(self.mean)),
                "max_stderr": float(self.stderr.max())}


def _single_state(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (d,):
        raise InvalidArgument(f"state must have shape ({d},), got {x.shape}")
    return x[None, :]


def _step_quantities(student, teacher, x, j, sched, c):
    if not sched.noise_level > 0:
        raise InvalidArgument("estimator study needs noise level > 0")
    xb = _single_state(x, student.arch.d)
    var = sched.variance(j)
    mu_t = transition_mean(teacher, xb, j, sched, c)
    path = grad_scalar_loss(
        student, lambda s: gaussian_kl_same_cov(transition_mean(s, xb, j, sched, c), mu_t, var).sum(),
        context=f"pathwise j={j}")
    jac = np.stack([
        grad_scalar_loss(student, lambda s, k=k: transition_mean(s, xb, j, sched, c)[0, k]).grad
        for k in range(student.arch.d)])
    return xb, var, mu_t, path, jac


def _affine_moments(jac, scale, n, rng, chunk):
    """Streaming mean/variance of ``scale * eps @ jac`` over ``n`` draws of ``eps``."""
    d, p = jac.shape
    total = np.zeros(p)
    total_sq = np.zeros(p)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        s = scale * (rng.standard_normal((m, d)) @ jac)
        total += s.sum(axis=0)
        total_sq += (s * s).sum(axis=0)
        done += m
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean, var


def estimator_study(student: VelocityField, teacher: VelocityField, x, j: int, sched: Schedule,
                    c: int, n_samples: int, rng: np.random.Generator, chunk: int = 4096):
    """Pathwise and PPO gradient reports at the fixed state ``x`` and step ``j``."""
    if n_samples < MIN_ESTIMATOR_SAMPLES:
        raise InvalidArgument(f"n_samples must be >= {MIN_ESTIMATOR_SAMPLES}")
    _, var, _, path, jac = _step_quantities(student, teacher, x, j, sched, c)
    delta = path.value
    extra_mean, extra_var = _affine_moments(jac, delta / math.sqrt(var), n_samples, rng, chunk)
    pathwise = GradientReport("pathwise", path.grad, np.zeros_like(path.grad), 1)
    ppo = GradientReport("ppo_surrogate", path.grad + extra_mean, extra_var, n_samples,
                         max_bias=float(np.abs(extra_mean).max()))
    return pathwise, ppo


def score_term_study(student: VelocityField, teacher: VelocityField, x, j: int, sched: Schedule,
                     c: int, n_samples: int, rng: np.random.Generator,
                     chunk: int = 4096) -> GradientReport:
    """Statistics of the zero-mean score-function part of the PPO gradient."""
    _, var, _, path, jac = _step_quantities(student, teacher, x, j, sched, c)
    mean, v = _affine_moments(jac, path.value / math.sqrt(var), n_samples, rng, chunk)
    return GradientReport("score_function", mean, v, n_samples, max_bias=float(np.abs(mean).max()))


def ppo_step_gradient(student: VelocityField, teacher: VelocityField, x, j: int, sched: Schedule,
                      c: int, eps: np.ndarray, clip_eps: float = 0.2) -> np.ndarray:
    """Reverse-mode gradient of the batch-mean clipped surrogate at one state.

    ``eps`` has shape ``(n, d)``; the old policy is a frozen copy of ``student``.
    """
    xb = _single_state(x, student.arch.d)
    n = eps.shape[0]
    xs = np.repeat(xb, n, axis=0)
    var = sched.variance(j)
    snapshot = student.copy()
    mu_old = transition_mean(snapshot, xs, j, sched, c)
    mu_t = transition_mean(teacher, xs, j, sched, c)
    actions = mu_old + math.sqrt(var) * eps
    logp_old = log_transition_density(mu_old, var, actions)

    def closure(s):
        mu = transition_mean(s, xs, j, sched, c)
        ratio = ad.exp(log_transition_density(mu, var, actions) - logp_old)
        adv = -gaussian_kl_same_cov(mu, mu_t, var)
        return -clipped_surrogate(ratio, adv, clip_eps).mean()

    return grad_scalar_loss(student, closure, context=f"ppo step j={j}").grad


# -- sweeps ----------------------------------------------------------------------

def average_normalized(rewards: dict, base: dict, teacher: dict) -> float:
    """Mean over tasks of ``(r - r_base) / (r_teacher - r_base)``."""
    vals = []
    for k, r in rewards.items():
        span = teacher[k] - base[k]
        if abs(span) < 1e-9:
            raise InvalidArgument(f"teacher and base rewards coincide on task {k}")
        vals.append((r - base[k]) / span)
    return float(np.mean(vals))


def _series(rows, n_tasks):
    out = []
    for r in rows:
        if r["eval_reward"] == "":
            continue
        out.append(r)
    pts = {}
    for r in out:
        pts.setdefault(r["round"], []).append(r)
    return [{"round": k, "fwd_evals": v[0]["fwd_evals"],
             "avg_reward": float(np.mean([x["eval_reward"] for x in v])),
             "rewards": {x["task"]: x["eval_reward"] for x in v}}
            for k, v in sorted(pts.items()) if len(v) == n_tasks]


def noise_sweep(student_init: VelocityField, teachers, a_values, budget: int, sched: Schedule,
                rng: np.random.Generator, base_cfg: DistillConfig = DistillConfig(),
                evaluator: EvalHook | None = None, metrics=None) -> dict:
    """Distil at each noise level with a matched forward-evaluation budget.

    Returns ``{a: series}`` where each series lists evaluation points
    ``{round, fwd_evals, avg_reward, rewards}``.
    """
    if 0 not in [float(a) for a in a_values]:
        raise InvalidArgument("the noise sweep must include a = 0")
    out = {}
    for a in a_values:
        cfg = DistillConfig.for_noise(float(a), rounds=10 ** 9, batch=base_cfg.batch, lr=base_cfg.lr,
                                      step_reduce=base_cfg.step_reduce, clip_eps=base_cfg.clip_eps,
                                      shuffle=base_cfg.shuffle)
        rows = []

        def sink(row, a=a):
            rows.append(row)
            if metrics is not None:
                metrics({**row, "noise_level": a})

        distill(student_init, teachers, cfg, sched, child(rng, "noise", repr(float(a))),
                metrics=sink, evaluator=evaluator, max_fwd_evals=budget)
        out[float(a)] = _series(rows, len(teachers))
    return out


def loss_mode_sweep(student_init: VelocityField, teachers, noise_level: float, budget: int,
                    sched: Schedule, rng: np.random.Generator, seeds=range(8),
                    base_cfg: DistillConfig = DistillConfig(), evaluator: EvalHook | None = None,
                    metrics=None) -> dict:
    """Paired closed-form-KL vs PPO-surrogate distillation runs.

    For each mode, every seed runs with the same budget; the result holds the
    evaluation series of each seed and the update-norm variance across seeds,
    computed per round and averaged over the rounds all seeds reached.
    """
    if not noise_level > 0:
        raise InvalidArgument("loss-mode sweep needs noise level > 0")
    out = {}
    for mode in ("closed_form_kl", "ppo_surrogate"):
        cfg = DistillConfig.for_noise(noise_level, mode, rounds=10 ** 9, batch=base_cfg.batch,
                                      lr=base_cfg.lr, step_reduce=base_cfg.step_reduce,
                                      clip_eps=base_cfg.clip_eps, shuffle=base_cfg.shuffle)
        norms, grads, series = [], [], []
        for seed in seeds:
            rows = []

            def sink(row, seed=seed, mode=mode):
                rows.append(row)
                if metrics is not None:
                    metrics({**row, "seed": seed})

            res = distill(student_init, teachers, cfg, sched, child(rng, "seed", seed),
                          metrics=sink, evaluator=evaluator, max_fwd_evals=budget)
            norms.append([h["update_norm"] for h in res.history])
            grads.append([h["grad_norm"] for h in res.history])
            series.append(_series(rows, len(teachers)))
        k = min(len(n) for n in norms)
        u = np.array([n[:k] for n in norms])
        g = np.array([n[:k] for n in grads])
        out[mode] = {"series": series, "rounds": k,
                     "update_norm_var": float(u.var(axis=0, ddof=1).mean()) if len(u) > 1 else 0.0,
                     "grad_norm_var": float(g.var(axis=0, ddof=1).mean()) if len(g) > 1 else 0.0,
                     "update_norm_mean": float(u.mean())}
    return out


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.mean(keepdims=True) if v.size else v
    return np.convolve(v, np.ones(window) / window, mode="valid")
