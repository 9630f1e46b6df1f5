import json
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate

from diffopd.errors import InvalidArgument, NumericError
from diffopd.net import VelocityField
from diffopd.sampler import (log_transition_density, mean_coefficients, ode_step, replay, rollout,
                             sample, sde_step, transition_mean)
from diffopd.schedule import Schedule, make_uniform_schedule
from diffopd.tasks import mode_stats, ring_mixture


class ConstField:
    """Velocity field returning a fixed vector; enough for kernel algebra checks."""

    def __init__(self, v, d=2):
        self.v = np.asarray(v, dtype=float)
        self.arch = type("A", (), {"d": d})()

    def forward(self, x, t, c):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.v, x.shape).copy()


def test_ode_mean_is_euler_step():
    sched = make_uniform_schedule(4, 0.0)
    x = np.array([0.3, -1.2])
    v = np.array([2.0, 0.5])
    mu = transition_mean(ConstField(v), x, 1, sched, 0)
    np.testing.assert_array_equal(mu, x - 0.25 * v)


def test_sde_mean_coefficients_example():
    sched = Schedule((1.0, 0.5, 0.4, 0.0), 0.7)
    cx, cv = mean_coefficients(sched, 1)
    # exact rational oracle: sigma^2 = 0.49 at t = 0.5, dt = -0.1
    s2, t, dt = Fraction(49, 100), Fraction(1, 2), Fraction(-1, 10)
    cx_exact = 1 + s2 * dt / (2 * t)
    cv_exact = (1 + s2 * (1 - t) / (2 * t)) * dt
    assert cx_exact == Fraction(951, 1000) and cv_exact == Fraction(-1245, 10000)
    assert cx == pytest.approx(float(cx_exact), rel=1e-13)
    assert cv == pytest.approx(float(cv_exact), rel=1e-13)
    x, v = np.array([1.0, 2.0]), np.array([-0.5, 3.0])
    mu = transition_mean(ConstField(v), x, 1, sched, 0)
    np.testing.assert_allclose(mu, 0.951 * x - 0.1245 * v, rtol=1e-13)


def test_identical_velocities_identical_means(make_field, rng):
    a = make_field(1)
    b = VelocityField(a.arch, a.params.copy())
    sched = make_uniform_schedule(10, 0.7)
    x = rng.standard_normal((6, 2))
    for j in range(10):
        np.testing.assert_array_equal(transition_mean(a, x, j, sched, 2),
                                      transition_mean(b, x, j, sched, 2))


def test_sde_step_degenerate_cases(make_field, rng):
    vf = make_field(2)
    x = rng.standard_normal((3, 2))
    s = make_uniform_schedule(5, 0.7)
    np.testing.assert_array_equal(sde_step(vf, x, 2, s, 0, np.zeros((3, 2))),
                                  transition_mean(vf, x, 2, s, 0))
    s0 = s.with_noise(0.0)
    np.testing.assert_array_equal(sde_step(vf, x, 2, s0, 0, rng.standard_normal((3, 2))),
                                  transition_mean(vf, x, 2, s0, 0))


def test_sde_step_moments_monte_carlo(make_field, rng):
    vf = make_field(3)
    s = make_uniform_schedule(10, 0.7)
    j = 4
    x = np.array([0.4, -0.9])
    n = 100_000
    eps = rng.standard_normal((n, 2))
    nxt = sde_step(vf, np.broadcast_to(x, (n, 2)), j, s, 1, eps)
    mu = transition_mean(vf, x, j, s, 1)
    se = nxt.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(nxt.mean(axis=0) - mu) <= 4 * se)
    # per-coordinate variance matches the kernel variance within a 4-sigma band
    var_hat = nxt.var(axis=0, ddof=1)
    band = 4 * s.variance(j) * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(var_hat - s.variance(j)) <= band)


def test_log_density_examples():
    assert log_transition_density(np.array([0.7]), 1 / (2 * math.pi), np.array([0.7])) == pytest.approx(0.0, abs=1e-15)
    assert log_transition_density(np.zeros(2), 1.0, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert -math.log(2 * math.pi) == pytest.approx(-1.837877, abs=1e-6)


def test_log_density_integrates_to_one():
    mu, var = 0.3, 0.2
    f = lambda a: math.exp(log_transition_density(np.array([mu]), var, np.array([a])))
    total, _ = integrate.quad(f, -10, 10, epsabs=1e-12)
    assert abs(total - 1.0) < 1e-4


def test_log_density_rejects_zero_variance():
    with pytest.raises(InvalidArgument):
        log_transition_density(np.zeros(2), 0.0, np.zeros(2))


def test_rollout_shapes_and_determinism(make_field):
    from diffopd.rng import stream
    vf = make_field(4)
    s = make_uniform_schedule(6, 0.7)
    a = rollout(vf, s, 1, stream(0, "r"), n=5)
    b = rollout(vf, s, 1, stream(0, "r"), n=5)
    assert a.states.shape == (7, 5, 2) and a.noises.shape == (6, 5, 2)
    assert a.is_sde and a.n_steps == 6 and a.batch == 5
    np.testing.assert_array_equal(a.states, b.states)
    ode = rollout(vf, s.with_noise(0.0), 1, stream(0, "r"), n=5)
    assert ode.noises.shape == (0, 5, 2) and not ode.is_sde
    with pytest.raises(ValueError):
        a.states[0, 0, 0] = 1.0


def test_single_step_ode_rollout(make_field):
    from diffopd.rng import stream
    vf = make_field(5)
    s = make_uniform_schedule(1, 0.0)
    tr = rollout(vf, s, 2, stream(1, "r"), n=4)
    x0 = tr.states[0]
    np.testing.assert_array_equal(tr.states[1], x0 + vf.forward(x0, 1.0, 2) * (-1.0))


def test_replay_reproduces_sde_and_ode(make_field):
    from diffopd.rng import stream
    vf = make_field(6)
    for a in (0.0, 0.7):
        tr = rollout(vf, make_uniform_schedule(8, a), 0, stream(2, "r"), n=16)
        np.testing.assert_array_equal(replay(vf, tr), tr.states)


def test_ode_limit_bit_identical(make_field):
    from diffopd.rng import stream
    vf = make_field(7)
    s = make_uniform_schedule(12, 0.0)
    via_sde = rollout(vf, s, 1, stream(3, "r"), n=32, method="sde")
    via_ode = rollout(vf, s, 1, stream(3, "r"), n=32, method="ode")
    assert via_sde.states.tobytes() == via_ode.states.tobytes()
    x = via_ode.states[3]
    assert transition_mean(vf, x, 3, s, 1).tobytes() == ode_step(vf, x, 3, s, 1).tobytes()


def test_ode_method_needs_zero_noise(make_field, rng):
    with pytest.raises(InvalidArgument):
        rollout(make_field(), make_uniform_schedule(3, 0.5), 0, rng, method="ode")


def test_non_finite_state_reports_step(make_field, rng):
    vf = make_field()

    class Exploding:
        arch = vf.arch

        def forward(self, x, t, c):
            out = vf.forward(x, t, c)
            return out * np.inf if t < 0.7 else out

    with pytest.raises(NumericError, match="step 2"):
        rollout(Exploding(), make_uniform_schedule(5, 0.0), 0, rng)


def test_rollout_never_tracks_gradients(make_field):
    from diffopd.net import Tracked
    from diffopd.rng import stream
    vf = make_field(8)
    tr = rollout(Tracked(vf), make_uniform_schedule(4, 0.7), 0, stream(0, "r"), n=3)
    assert isinstance(tr.states, np.ndarray)


def test_dump_jsonl(tmp_path, make_field):
    from diffopd.rng import stream
    tr = rollout(make_field(), make_uniform_schedule(3, 0.7), 2, stream(0, "d"), n=2)
    p = tmp_path / "traj.jsonl"
    tr.dump_jsonl(p)
    rows = [json.loads(line) for line in p.read_text().splitlines()]
    assert len(rows) == 2 * 4
    assert rows[0]["step"] == 0 and rows[0]["cond"] == 2 and rows[0]["t"] == 1.0
    assert rows[1]["noise"] == tr.noises[1, 0].tolist()
    assert rows[3]["noise"] is None


@pytest.mark.slow
def test_pretrained_rollouts_land_on_modes(reference_base):
    from diffopd.rng import stream
    cfg, vf, _ = reference_base
    target = ring_mixture()
    oracle_cov, oracle_near = mode_stats(target.sample(4096, stream(0, "gt")), target)
    assert oracle_near > 0.99 and oracle_cov == 1.0
    x = sample(vf, cfg.base_schedule(), 0, stream(0, "modes"), 4096)
    cov, near = mode_stats(x, target)
    assert near >= 0.95
    assert cov == 1.0
