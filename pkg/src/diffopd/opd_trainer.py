"""Multi-task on-policy distillation and the multi-task baselines.

``distill`` runs the round-robin on-policy loop: every round each task's
teacher supervises a fresh batch of student rollouts, the task losses are
averaged, and one optimizer step is taken.  The baselines (joint RL, cascade RL,
SFT on teacher samples) share the same budget accounting: the number of rows
pushed through the *student* network.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidArgument, NumericError
from .flowmatch import fm_loss
from .net import VelocityField, grad_scalar_loss, save_checkpoint
from .objectives import LOSS_MODES, distill_loss
from .optim import Adam
from .rl_teacher import RlConfig, rl_train
from .rng import child, stream
from .sampler import rollout, sample
from .schedule import Schedule
from .tasks import evaluate


@dataclass(frozen=True)
class DistillConfig:
    rounds: int = 400
    batch: int = 64
    lr: float = 2e-3
    noise_level: float = 0.0
    loss_mode: str = "ode_l2"
    accumulation: int | None = None
    step_reduce: str = "sum"
    clip_eps: float = 0.2
    shuffle: bool = False
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if (self.loss_mode == "ode_l2") != (self.noise_level == 0.0):
            raise ConfigError("loss_mode 'ode_l2' is used exactly when noise_level == 0")
        if self.noise_level < 0 or self.rounds < 0 or self.batch < 1:
            raise ConfigError(f"bad distillation config {self}")
        if self.accumulation is not None and self.accumulation < 1:
            raise ConfigError("accumulation must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @classmethod
    def for_noise(cls, noise_level: float, mode: str | None = None, **kw) -> "DistillConfig":
        """Config with the loss mode implied by the noise level unless given."""
        if mode is None:
            mode = "ode_l2" if noise_level == 0 else "closed_form_kl"
        return cls(noise_level=noise_level, loss_mode=mode, **kw)


@dataclass
class EvalHook:
    """Periodic deterministic evaluation of a student on every task."""
    tasks: list
    sched: Schedule
    n: int = 512
    every: int = 10
    seed_rng: np.random.Generator = field(default_factory=lambda: stream(0, "eval"))

    def due(self, k: int, last: int) -> bool:
        return self.every > 0 and (k % self.every == 0 or k == last)

    def __call__(self, vf: VelocityField) -> dict:
        probe = vf.copy()
        out = {}
        for task in self.tasks:
            rng = child(self.seed_rng, "eval", task.id)
            out[task.id] = evaluate(probe, task, self.sched, self.n, rng).mean_reward
        return out


@dataclass
class TrainResult:
    vf: VelocityField
    fwd_evals: int
    history: list = field(default_factory=list)
    trace: list = field(default_factory=list)


def distill(student_init: VelocityField, teachers, cfg: DistillConfig, sched: Schedule,
            rng: np.random.Generator, metrics=None, evaluator: EvalHook | None = None,
            abort_path=None, max_fwd_evals: int | None = None, checkpoint=None) -> TrainResult:
    """On-policy distillation of ``teachers`` (a list of ``(task, teacher_field)``).

    The result's ``trace`` lists ``(round, task_id, params_digest)`` for every
    rollout, so callers can verify rollouts always use the latest parameters.
    ``checkpoint(round, field)`` is called every ``cfg.checkpoint_every`` rounds.
    """
    if not teachers:
        raise ConfigError("distillation needs at least one (task, teacher) pair")
    for task, teacher in teachers:
        if teacher is None:
            raise ConfigError(f"missing teacher for task {task.name!r}")
    sched = sched.with_noise(cfg.noise_level)
    student = student_init.copy()
    opt = Adam(student.arch.n_params, lr=cfg.lr)
    acc = cfg.accumulation or len(teachers)
    streams = {task.id: child(rng, "task", task.id) for task, _ in teachers}
    order_rng = child(rng, "order")
    result = TrainResult(student, 0)
    grad = np.zeros(student.arch.n_params)
    pending = 0
    snap_evals = 0
    start = time.perf_counter()
    for k in range(cfg.rounds):
        order = list(range(len(teachers)))
        if cfg.shuffle:
            order_rng.shuffle(order)
        snapshot = student.copy() if cfg.loss_mode == "ppo_surrogate" else None
        row_losses = {}
        for m in order:
            task, teacher = teachers[m]
            result.trace.append((k, task.id, student.digest()))
            traj = rollout(student, sched, task.id, streams[task.id], n=cfg.batch)
            try:
                res = grad_scalar_loss(
                    student,
                    lambda s: distill_loss(cfg.loss_mode, s, teacher, traj, snapshot=snapshot,
                                           clip_eps=cfg.clip_eps, step_reduce=cfg.step_reduce),
                    context=f"round {k} task {task.id}")
            except NumericError:
                if abort_path is not None:
                    save_checkpoint(student, abort_path)
                raise
            grad += res.grad
            pending += 1
            row_losses[task.id] = res.value
            if pending == acc:
                delta = opt.step(student.params, grad / pending)
                result.history.append({"round": k, "update_norm": float(np.linalg.norm(delta)),
                                       "grad_norm": float(np.linalg.norm(grad / pending))})
                grad = np.zeros_like(grad)
                pending = 0
        if snapshot is not None:
            snap_evals += snapshot.fwd_evals
        result.fwd_evals = student.fwd_evals + snap_evals
        stop = max_fwd_evals is not None and result.fwd_evals >= max_fwd_evals
        evals = evaluator(student) if evaluator and (stop or evaluator.due(k, cfg.rounds - 1)) else {}
        if metrics is not None:
            elapsed = time.perf_counter() - start
            for task, _ in teachers:
                metrics({"round": k, "task": task.id, "loss_mode": cfg.loss_mode,
                         "loss": row_losses[task.id], "eval_reward": evals.get(task.id, ""),
                         "fwd_evals": result.fwd_evals, "wallclock_s": elapsed})
        if checkpoint is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            checkpoint(k, student)
        if stop:
            break
    return result


def train_joint_rl(student_init: VelocityField, tasks, rl_cfg: RlConfig, sched: Schedule,
                   rng: np.random.Generator, metrics=None, abort_path=None,
                   max_fwd_evals: int | None = None) -> TrainResult:
    """Round-robin multi-task RL with one step per round on the task-averaged loss."""
    vf, n = rl_train(student_init, tasks, rl_cfg, sched, rng, metrics=metrics, label="joint",
                     abort_path=abort_path, max_fwd_evals=max_fwd_evals)
    return TrainResult(vf, n)


def train_cascade_rl(student_init: VelocityField, tasks, rl_cfg: RlConfig, sched: Schedule,
                     rng: np.random.Generator, metrics=None, evaluator: EvalHook | None = None,
                     abort_path=None) -> TrainResult:
    """Full RL budget on each task in turn, each stage starting from the last.

    ``history`` holds one entry per stage with every task's evaluation reward,
    which exposes forgetting of earlier tasks.
    """
    vf = student_init
    total = 0
    history = []
    offset = 0
    for stage, task in enumerate(tasks):
        def stage_metrics(row, stage=stage):
            if metrics is not None:
                metrics({**row, "stage": stage})

        vf, n = rl_train(vf, [task], rl_cfg, sched, rng, metrics=stage_metrics,
                         label=f"cascade stage {stage}", abort_path=abort_path, start_iter=offset)
        offset += rl_cfg.iterations
        total += n
        entry = {"stage": stage, "task": task.id, "fwd_evals": total}
        if evaluator is not None:
            entry["eval_reward"] = evaluator(vf)
        history.append(entry)
    return TrainResult(vf, total, history)


@dataclass(frozen=True)
class SftConfig:
    rounds: int = 1500
    batch: int = 256
    lr: float = 1e-3


def train_sft_distill(student_init: VelocityField, teachers, cfg: SftConfig, sched_eval: Schedule,
                      rng: np.random.Generator, metrics=None, evaluator: EvalHook | None = None,
                      max_fwd_evals: int | None = None) -> TrainResult:
    """Off-policy distillation: flow-matching regression on fresh teacher ODE samples."""
    if sched_eval.noise_level != 0.0:
        raise InvalidArgument("teachers generate SFT data with the deterministic sampler")
    student = student_init.copy()
    opt = Adam(student.arch.n_params, lr=cfg.lr)
    streams = {task.id: child(rng, "task", task.id) for task, _ in teachers}
    result = TrainResult(student, 0)
    start = time.perf_counter()
    for k in range(cfg.rounds):
        grad = np.zeros(student.arch.n_params)
        row_losses = {}
        for task, teacher in teachers:
            r = streams[task.id]
            x0 = sample(teacher, sched_eval, task.id, r, cfg.batch)
            x1 = r.standard_normal(x0.shape)
            t = r.uniform(0.0, 1.0, size=cfg.batch)
            c = np.full(cfg.batch, task.id)
            res = grad_scalar_loss(student, lambda s: fm_loss(s, x0, x1, t, c),
                                   context=f"sft round {k} task {task.id}")
            grad += res.grad
            row_losses[task.id] = res.value
        delta = opt.step(student.params, grad / len(teachers))
        result.history.append({"round": k, "update_norm": float(np.linalg.norm(delta))})
        result.fwd_evals = student.fwd_evals
        stop = max_fwd_evals is not None and result.fwd_evals >= max_fwd_evals
        evals = evaluator(student) if evaluator and (stop or evaluator.due(k, cfg.rounds - 1)) else {}
        if metrics is not None:
            elapsed = time.perf_counter() - start
            for task, _ in teachers:
                metrics({"round": k, "task": task.id, "loss_mode": "sft",
                         "loss": row_losses[task.id], "eval_reward": evals.get(task.id, ""),
                         "fwd_evals": result.fwd_evals, "wallclock_s": elapsed})
        if stop:
            break
    return result
