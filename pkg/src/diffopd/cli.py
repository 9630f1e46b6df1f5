"""Command-line experiment runner.

    diffopd --config CFG --stage STAGE[,STAGE...] [--seed N] [--out DIR] [--threads N]

Stages: pretrain, teachers, distill, joint-rl, cascade, sft, variance,
sweep-noise, sweep-loss, eval, or ``all``.  Exit codes: 0 ok, 2 config error,
3 numeric error, 4 missing prerequisite.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, reference_config_path
from .errors import ConfigError, MissingPrerequisite, OPDError
from .flowmatch import fm_loss_floor, pretrain
from .lab import (average_normalized, estimator_study, loss_mode_sweep, noise_sweep,
                  score_term_study)
from .net import load_checkpoint, save_checkpoint
from .opd_trainer import (EvalHook, distill, train_cascade_rl, train_joint_rl,
                          train_sft_distill)
from .rl_teacher import train_teacher
from .rng import stream
from .tasks import evaluate

log = logging.getLogger("diffopd")

STAGES = ("pretrain", "teachers", "distill", "joint-rl", "cascade", "sft", "variance",
          "sweep-noise", "sweep-loss", "eval")

DISTILL_COLUMNS = ("round", "task", "loss_mode", "loss", "eval_reward", "fwd_evals", "wallclock_s")
TEACHER_COLUMNS = ("iter", "task", "mean_reward", "loss", "wallclock_s")
RL_COLUMNS = ("iter", "task", "mean_reward", "loss", "fwd_evals", "wallclock_s")


# -- output helpers -------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


class CsvSink:
    """Row writer that lands at ``path`` only when closed successfully.

    Until then the file lives at ``path + '.partial'``.
    """

    def __init__(self, path: Path, columns):
        self.path = Path(path)
        self.partial = self.path.with_name(self.path.name + ".partial")
        self.columns = tuple(columns)
        self._fh = open(self.partial, "w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="ignore",
                                 lineterminator="\n")
        self._w.writeheader()

    def __call__(self, row: dict) -> None:
        self._w.writerow({k: _fmt(v) for k, v in row.items()})

    def close(self) -> None:
        self._fh.close()
        os.replace(self.partial, self.path)

    def abandon(self) -> None:
        self._fh.close()


class Run:
    """Per-invocation context: config, output directory, artifacts, manifest."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.tasks = cfg.task_suite()
        self.sched = cfg.base_schedule()
        self._sinks = []

    # paths
    def path(self, name: str) -> Path:
        return self.out / name

    def teacher_path(self, task) -> Path:
        return self.path(f"teacher_{task.name}.ckpt")

    def require(self, *names) -> list:
        paths = [self.path(n) for n in names]
        for p in paths:
            if not p.exists():
                raise MissingPrerequisite(f"missing prerequisite artifact {p}; run the producing stage first")
        return paths

    def base(self):
        return load_checkpoint(self.require("base.ckpt")[0])

    def teachers(self) -> list:
        names = [self.teacher_path(t).name for t in self.tasks]
        return list(zip(self.tasks, [load_checkpoint(p) for p in self.require(*names)]))

    def rng(self, *names):
        return stream(self.cfg.seed, *names)

    def evaluator(self) -> EvalHook:
        e = self.cfg.eval
        return EvalHook(self.tasks, self.sched, n=e.curve_n, every=e.every,
                        seed_rng=self.rng("curve"))

    # writers
    def sink(self, name: str, columns) -> CsvSink:
        s = CsvSink(self.path(name), columns)
        self._sinks.append(s)
        return s

    def save(self, vf, name: str) -> Path:
        p = self.path(name)
        tmp = p.with_name(p.name + ".partial")
        save_checkpoint(vf, tmp)
        os.replace(tmp, p)
        return p

    def report(self, name: str, data: dict) -> Path:
        p = self.path(name)
        tmp = p.with_name(p.name + ".partial")
        payload = {"config_hash": self.cfg.digest(), "seed": self.cfg.seed, **data}
        tmp.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, p)
        return p

    def finish(self, ok: bool) -> list:
        done = []
        for s in self._sinks:
            if ok:
                s.close()
                done.append(s.path.name)
            else:
                s.abandon()
        self._sinks = []
        return done

    def final_rewards(self, vf, tag: str) -> dict:
        # score the parameters exactly as a checkpoint stores them
        vf = vf.copy()
        vf.params[:] = vf.params.astype(np.float32)
        n = self.cfg.eval.n
        return {t.name: evaluate(vf, t, self.sched, n, self.rng("eval", tag, t.id)).mean_reward
                for t in self.tasks}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _git_version() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        desc = res.stdout.strip() if res.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+g{desc}" if desc else __version__


# -- stages ---------------------------------------------------------------------

def stage_pretrain(run: Run) -> list:
    cfg = run.cfg
    sink = run.sink("pretrain_metrics.csv", ("step", "loss", "wallclock_s"))
    vf, losses = pretrain(cfg.arch(), run.tasks, cfg.pretrain, run.rng("pretrain"),
                          log=lambda step, loss, el: sink({"step": step, "loss": loss, "wallclock_s": el}))
    run.save(vf, "base.ckpt")
    target = run.tasks[0].target
    floor, floor_se = fm_loss_floor(target, 100_000, run.rng("pretrain-floor"))
    head = max(1, min(10, len(losses)))
    tail = max(1, min(200, len(losses)))
    run.report("pretrain.json", {
        "initial_loss": float(np.mean(losses[:head])),
        "final_loss": float(np.mean(losses[-tail:])),
        "zero_field_loss": float(target.d + target.second_moment()),
        "optimal_loss": floor, "optimal_loss_stderr": floor_se,
        "base_rewards": run.final_rewards(vf, "base"),
    })
    return ["base.ckpt", "pretrain.json"]


def stage_teachers(run: Run) -> list:
    base = run.base()
    sink = run.sink("teachers_metrics.csv", TEACHER_COLUMNS)
    out, rewards, cross = [], {}, {}
    for task in run.tasks:
        vf = train_teacher(base, task, run.cfg.rl, run.sched, run.rng("teachers"), metrics=sink,
                           abort_path=run.path(f"teacher_{task.name}.abort.ckpt"))
        out.append(run.save(vf, run.teacher_path(task).name).name)
        # every task under this teacher's own condition label exposes specialisation
        stored = load_checkpoint(run.teacher_path(task))
        cross[task.name] = {
            t.name: evaluate(stored, t, run.sched, run.cfg.eval.n,
                             run.rng("eval", f"cross-{task.name}", t.id), cond=task.id).mean_reward
            for t in run.tasks}
        rewards[task.name] = cross[task.name][task.name]
    run.report("teachers.json", {"teacher_rewards": rewards, "cross_rewards": cross})
    return out + ["teachers.json"]


def stage_distill(run: Run) -> list:
    base, teachers = run.base(), run.teachers()
    sink = run.sink("distill_metrics.csv", DISTILL_COLUMNS)
    snaps = []
    res = distill(base, teachers, run.cfg.distill, run.sched, run.rng("distill"), metrics=sink,
                  evaluator=run.evaluator(), abort_path=run.path("student_opd.abort.ckpt"),
                  checkpoint=lambda k, vf: snaps.append(run.save(vf, f"student_opd_round{k + 1:05d}.ckpt").name))
    run.save(res.vf, "student_opd.ckpt")
    run.report("distill.json", {"fwd_evals": res.fwd_evals, "rewards": run.final_rewards(res.vf, "opd")})
    return ["student_opd.ckpt", "distill.json"] + snaps


def _budget(run: Run) -> int:
    return run.cfg.distill_budget()


def stage_joint_rl(run: Run) -> list:
    base = run.base()
    sink = run.sink("joint_rl_metrics.csv", RL_COLUMNS)
    rl = dataclasses.replace(run.cfg.rl, iterations=10 ** 9)
    res = train_joint_rl(base, run.tasks, rl, run.sched, run.rng("joint-rl"), metrics=sink,
                         abort_path=run.path("student_joint.abort.ckpt"), max_fwd_evals=_budget(run))
    run.save(res.vf, "student_joint.ckpt")
    run.report("joint_rl.json", {"fwd_evals": res.fwd_evals, "budget": _budget(run),
                                 "rewards": run.final_rewards(res.vf, "joint")})
    return ["student_joint.ckpt", "joint_rl.json"]


def stage_cascade(run: Run) -> list:
    base = run.base()
    sink = run.sink("cascade_metrics.csv", ("stage",) + RL_COLUMNS)
    stages = []

    def probe(vf):
        stages.append(run.final_rewards(vf, f"cascade-{len(stages)}"))
        return stages[-1]

    res = train_cascade_rl(base, run.tasks, run.cfg.rl, run.sched, run.rng("cascade"),
                           metrics=sink, evaluator=probe,
                           abort_path=run.path("student_cascade.abort.ckpt"))
    run.save(res.vf, "student_cascade.ckpt")
    first = run.tasks[0].name
    run.report("cascade.json", {
        "stages": [{"stage": h["stage"], "task": run.tasks[h["task"]].name,
                    "fwd_evals": h["fwd_evals"], "rewards": h["eval_reward"]} for h in res.history],
        "first_task": first,
        "first_task_drop": stages[0][first] - stages[-1][first],
        "rewards": stages[-1],
    })
    return ["student_cascade.ckpt", "cascade.json"]


def stage_sft(run: Run) -> list:
    base, teachers = run.base(), run.teachers()
    sink = run.sink("sft_metrics.csv", DISTILL_COLUMNS)
    cfg = dataclasses.replace(run.cfg.sft, rounds=10 ** 9)
    res = train_sft_distill(base, teachers, cfg, run.sched, run.rng("sft"), metrics=sink,
                            evaluator=run.evaluator(), max_fwd_evals=_budget(run))
    run.save(res.vf, "student_sft.ckpt")
    run.report("sft.json", {"fwd_evals": res.fwd_evals, "budget": _budget(run),
                            "rewards": run.final_rewards(res.vf, "sft")})
    return ["student_sft.ckpt", "sft.json"]


def stage_variance(run: Run) -> list:
    base, teachers = run.base(), run.teachers()
    v = run.cfg.variance
    if not 0 <= v.task < len(teachers):
        raise ConfigError(f"variance.task {v.task} out of range")
    sched = run.sched.with_noise(v.noise_level)
    teacher = teachers[v.task][1]
    pathwise, ppo = estimator_study(base, teacher, np.array(v.state), v.step, sched, v.task,
                                    v.n_samples, run.rng("variance", "ppo"))
    score = score_term_study(base, teacher, np.array(v.state), v.step, sched, v.task,
                             v.n_samples, run.rng("variance", "score"))
    run.report("variance.json", {
        "pathwise": pathwise.to_dict(), "ppo": ppo.to_dict(), "score": score.to_dict(),
        "ppo_max_z_vs_pathwise": ppo.max_z(pathwise.mean),
        "score_max_z_vs_zero": score.max_z(np.zeros_like(score.mean)),
    })
    return ["variance.json"]


def stage_sweep_noise(run: Run) -> list:
    base, teachers = run.base(), run.teachers()
    sw = run.cfg.sweep
    budget = sw.budget or _budget(run)
    sink = run.sink("sweep_noise.csv", ("noise_level",) + DISTILL_COLUMNS)
    series = noise_sweep(base, teachers, list(sw.noise_levels), budget, run.sched,
                         run.rng("sweep-noise"), base_cfg=run.cfg.distill,
                         evaluator=run.evaluator(), metrics=sink)
    final = {repr(a): (s[-1]["avg_reward"] if s else None) for a, s in series.items()}
    run.report("sweep_noise.json", {"budget": budget, "final_avg_reward": final, "series": series})
    return ["sweep_noise.json"]


def stage_sweep_loss(run: Run) -> list:
    base, teachers = run.base(), run.teachers()
    sw = run.cfg.sweep
    budget = sw.loss_budget or _budget(run)
    sink = run.sink("sweep_loss.csv", ("seed",) + DISTILL_COLUMNS)
    res = loss_mode_sweep(base, teachers, sw.loss_noise_level, budget, run.sched,
                          run.rng("sweep-loss"), seeds=range(sw.seeds), base_cfg=run.cfg.distill,
                          evaluator=run.evaluator(), metrics=sink)
    summary = {m: {k: v for k, v in r.items() if k != "series"} for m, r in res.items()}
    for m, r in res.items():
        summary[m]["final_avg_reward"] = [s[-1]["avg_reward"] for s in r["series"] if s]
    run.report("sweep_loss.json", {"budget": budget, "noise_level": sw.loss_noise_level,
                                   "modes": summary})
    return ["sweep_loss.json"]


def _load_json(run: Run, name: str):
    p = run.path(name)
    return json.loads(p.read_text()) if p.exists() else None


def stage_eval(run: Run) -> list:
    """Re-evaluate every checkpoint present and summarise the comparisons."""
    base, teachers = run.base(), run.teachers()
    base_r = run.final_rewards(base, "base")
    teacher_r = {t.name: run.final_rewards(vf, f"teacher-{t.name}")[t.name] for t, vf in teachers}
    students = {}
    for tag, name in (("opd", "student_opd.ckpt"), ("joint_rl", "student_joint.ckpt"),
                      ("cascade", "student_cascade.ckpt"), ("sft", "student_sft.ckpt")):
        if run.path(name).exists():
            students[tag] = run.final_rewards(load_checkpoint(run.path(name)), tag)
    normalized = {k: average_normalized(r, base_r, teacher_r) for k, r in students.items()}
    checks = {"teachers_min_reward": min(teacher_r.values())}
    if "opd" in students:
        checks["opd_max_gap_to_teacher"] = max(teacher_r[k] - students["opd"][k] for k in teacher_r)
        for other in ("joint_rl", "sft"):
            if other in normalized:
                checks[f"opd_minus_{other}_normalized"] = normalized["opd"] - normalized[other]
    cascade = _load_json(run, "cascade.json")
    if cascade:
        checks["cascade_first_task_drop"] = cascade["first_task_drop"]
    noise = _load_json(run, "sweep_noise.json")
    if noise:
        checks["noise_final_avg_reward"] = noise["final_avg_reward"]
    loss = _load_json(run, "sweep_loss.json")
    if loss:
        checks["loss_update_norm_var"] = {m: r["update_norm_var"] for m, r in loss["modes"].items()}
    var = _load_json(run, "variance.json")
    if var:
        checks["estimator_max_z"] = var["ppo_max_z_vs_pathwise"]
        checks["score_max_z"] = var["score_max_z_vs_zero"]
    run.report("eval.json", {"base_rewards": base_r, "teacher_rewards": teacher_r,
                             "student_rewards": students, "normalized_reward": normalized,
                             "checks": checks})
    return ["eval.json"]


STAGE_FUNCS = {
    "pretrain": stage_pretrain, "teachers": stage_teachers, "distill": stage_distill,
    "joint-rl": stage_joint_rl, "cascade": stage_cascade, "sft": stage_sft,
    "variance": stage_variance, "sweep-noise": stage_sweep_noise, "sweep-loss": stage_sweep_loss,
    "eval": stage_eval,
}


def _update_manifest(run: Run, stage: str, outputs: list, wallclock: float) -> None:
    p = run.path("manifest.json")
    data = json.loads(p.read_text()) if p.exists() else {"stages": {}}
    data["config"] = run.cfg.to_dict()
    data["config_hash"] = run.cfg.digest()
    data["stages"][stage] = {"config_hash": run.cfg.digest(), "seed": run.cfg.seed,
                             "version": _git_version(), "wallclock_s": wallclock,
                             "outputs": sorted(outputs)}
    tmp = p.with_name(p.name + ".partial")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, p)


def run_stage(cfg: ExperimentConfig, stage: str, out: Path) -> list:
    """Run one stage; returns the names of the files it produced."""
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)} or 'all'")
    run = Run(cfg, Path(out))
    start = time.perf_counter()
    log.info("stage %s -> %s (config %s, seed %d)", stage, out, cfg.digest(), cfg.seed)
    try:
        outputs = STAGE_FUNCS[stage](run)
    except BaseException:
        run.finish(ok=False)
        raise
    outputs += run.finish(ok=True)
    wall = time.perf_counter() - start
    _update_manifest(run, stage, outputs, wall)
    log.info("stage %s done in %.1fs", stage, wall)
    return outputs


def resolve_out_dir(cfg: ExperimentConfig, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get("OPD_OUT_DIR")
    if env:
        return Path(env)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("opd_runs")


def parse_stages(spec: str) -> list:
    if spec == "all":
        return list(STAGES)
    stages = [s.strip() for s in spec.split(",") if s.strip()]
    bad = [s for s in stages if s not in STAGE_FUNCS]
    if bad or not stages:
        raise ConfigError(f"unknown stage(s) {bad or spec!r}; expected one of {', '.join(STAGES)} or 'all'")
    return stages


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffopd", description="On-policy distillation experiments.")
    p.add_argument("--config", default=None,
                   help="TOML experiment config (default: the shipped reference config)")
    p.add_argument("--stage", required=True, help=f"one of {', '.join(STAGES)}, a comma list, or 'all'")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: $OPD_OUT_DIR)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config or reference_config_path())
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        stages = parse_stages(args.stage)
        out = resolve_out_dir(cfg, args.out)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                for s in stages:
                    run_stage(cfg, s, out)
        else:
            for s in stages:
                run_stage(cfg, s, out)
    except OPDError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
