import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from diffopd.net import MLPArch, VelocityField
from diffopd.rng import stream


@pytest.fixture
def small_arch():
    return MLPArch(d=2, cond_vocab=3, hidden=(16, 16), activation="silu", n_freq=2)


@pytest.fixture
def make_field(small_arch):
    """Random fields with larger-than-default weights so outputs are not tiny."""
    def make(seed=0, scale=1.0, arch=None):
        arch = arch or small_arch
        vf = VelocityField.init(arch, stream(seed, "field"))
        vf.params *= scale
        return vf
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, params, idx, h=1e-5):
    """Central finite differences of scalar ``f(params)`` at coordinates ``idx``."""
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        p = params.copy()
        p[i] += h
        up = f(p)
        p[i] -= 2 * h
        down = f(p)
        out[n] = (up - down) / (2 * h)
    return out


def _finished(path: Path, digest: str) -> bool:
    eval_json = path / "eval.json"
    return eval_json.exists() and json.loads(eval_json.read_text())["config_hash"] == digest


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """``(config, output dir)`` of the full reference pipeline (about 12 minutes on one core).

    Set ``OPD_ACCEPTANCE_RUN`` to a finished run directory of the current
    reference config to reuse it.
    """
    from diffopd.cli import main
    from diffopd.config import load_config, reference_config_path

    cfg = load_config(reference_config_path())
    reuse = os.environ.get("OPD_ACCEPTANCE_RUN")
    if reuse and _finished(Path(reuse), cfg.digest()):
        return cfg, Path(reuse)
    out = tmp_path_factory.mktemp("reference")
    code = main(["--stage", "all", "--out", str(out), "-q"])
    assert code == 0, f"reference pipeline exited with {code}"
    return cfg, out


@pytest.fixture(scope="session")
def reference_base(reference_run):
    """Pretrained base field of the reference run and its per-step training losses."""
    from diffopd.net import load_checkpoint

    cfg, out = reference_run
    with open(out / "pretrain_metrics.csv") as fh:
        losses = np.array([float(r["loss"]) for r in csv.DictReader(fh)])
    return cfg, load_checkpoint(out / "base.ckpt"), losses


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
