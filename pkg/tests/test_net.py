import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffopd import autograd as ad
from diffopd.errors import InvalidArgument, NumericError
from diffopd.net import (MLPArch, VelocityField, grad_scalar_loss, load_checkpoint,
                         save_checkpoint, time_features)
from diffopd.rng import stream

from conftest import central_diff


def test_default_architecture_size():
    arch = MLPArch()
    assert arch.d_in == 2 + 9 + 3
    assert arch.layer_shapes == [(14, 64), (64, 64), (64, 64), (64, 2)]
    assert arch.n_params == 14 * 64 + 64 + 2 * (64 * 64 + 64) + 64 * 2 + 2


def test_zero_params_zero_output(small_arch, rng):
    vf = VelocityField.zeros(small_arch)
    out = vf.forward(rng.standard_normal((5, 2)), rng.uniform(size=5), rng.integers(0, 3, 5))
    assert out.shape == (5, 2)
    assert not out.any()


def test_forward_is_pure_and_counts_rows(make_field, rng):
    vf = make_field(3)
    x = rng.standard_normal((7, 2))
    a = vf.forward(x, 0.3, 1)
    b = vf(x, 0.3, 1)
    np.testing.assert_array_equal(a, b)
    assert vf.fwd_evals == 14
    assert vf.forward(x[0], 0.3, 1).shape == (2,)


def test_same_seed_same_init(small_arch):
    a = VelocityField.init(small_arch, stream(5, "x"))
    b = VelocityField.init(small_arch, stream(5, "x"))
    assert a.digest() == b.digest()


@pytest.mark.parametrize("c", [3, -1, 1.5])
def test_condition_out_of_range(make_field, c):
    with pytest.raises(InvalidArgument):
        make_field().forward(np.zeros(2), 0.5, c)


def test_wrong_state_dimension(make_field):
    with pytest.raises(InvalidArgument):
        make_field().forward(np.zeros(3), 0.5, 0)


def test_time_features_layout():
    f = time_features(np.array([0.25]), 2)
    np.testing.assert_allclose(f[0], [0.25, np.sin(np.pi / 4), np.sin(np.pi / 2),
                                      np.cos(np.pi / 4), np.cos(np.pi / 2)])


def _loss_from_params(vf, x, t, c):
    def f(p):
        probe = VelocityField(vf.arch, p)
        return 0.5 * float((probe.forward(x, t, c) ** 2).sum())
    return f


@pytest.mark.parametrize("activation", ["silu", "tanh"])
@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(activation, seed):
    arch = MLPArch(d=2, cond_vocab=3, hidden=(12, 10), activation=activation, n_freq=2)
    r = stream(seed, "gradcheck")
    vf = VelocityField.init(arch, r)
    x = r.standard_normal((4, 2))
    t = r.uniform(size=4)
    c = r.integers(0, 3, 4)
    res = grad_scalar_loss(vf, lambda s: 0.5 * ad.square_norm(s.forward(x, t, c)).sum())
    idx = np.arange(arch.n_params)
    fd = central_diff(_loss_from_params(vf, x, t, c), vf.params, idx, h=1e-5)
    scale = np.maximum(np.abs(fd), 1e-3)
    assert np.max(np.abs(res.grad - fd) / scale) < 1e-4


def test_jacobian_vector_product(make_field, rng):
    vf = make_field(1)
    x, t, c = rng.standard_normal(2), 0.4, 2
    direction = rng.standard_normal(vf.arch.n_params)
    h = 1e-5
    up = VelocityField(vf.arch, vf.params + h * direction).forward(x, t, c)
    dn = VelocityField(vf.arch, vf.params - h * direction).forward(x, t, c)
    fd = (up - dn) / (2 * h)
    jac = np.stack([grad_scalar_loss(vf, lambda s, k=k: s.forward(x, t, c)[k]).grad for k in range(2)])
    np.testing.assert_allclose(jac @ direction, fd, rtol=1e-6, atol=1e-9)


def test_constant_loss_zero_gradient(make_field):
    res = grad_scalar_loss(make_field(), lambda s: 3.5)
    assert res.value == 3.5
    assert not res.grad.any()


def test_gradient_linearity(make_field, rng):
    vf = make_field(2)
    x = rng.standard_normal((3, 2))
    f1 = lambda s: ad.square_norm(s.forward(x, 0.2, 0)).sum()
    f2 = lambda s: s.forward(x, 0.7, 1).sum() * 3.0
    g1 = grad_scalar_loss(vf, f1).grad
    g2 = grad_scalar_loss(vf, f2).grad
    g12 = grad_scalar_loss(vf, lambda s: f1(s) + f2(s)).grad
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-12)


def test_non_finite_loss_raises_with_context(make_field):
    with pytest.raises(NumericError, match="step 7"):
        grad_scalar_loss(make_field(), lambda s: s.forward(np.zeros(2), 0.5, 0).sum() * np.inf,
                         context=7)


def test_non_scalar_loss_rejected(make_field):
    with pytest.raises(InvalidArgument):
        grad_scalar_loss(make_field(), lambda s: s.forward(np.zeros((2, 2)), 0.5, 0))


def test_checkpoint_layout(tmp_path, make_field):
    vf = make_field(4)
    p = tmp_path / "m.ckpt"
    save_checkpoint(vf, p)
    blob = p.read_bytes()
    assert blob[:4] == b"OPDF"
    version, d, vocab, n_freq, act, n_layers = struct.unpack_from("<6I", blob, 4)
    assert (version, d, vocab, n_freq, n_layers) == (1, 2, 3, 2, 3)
    shapes = [struct.unpack_from("<2I", blob, 28 + 8 * k) for k in range(n_layers)]
    assert shapes == vf.arch.layer_shapes
    body = np.frombuffer(blob[28 + 8 * n_layers:], dtype="<f4")
    np.testing.assert_array_equal(body, vf.params.astype(np.float32))


def test_checkpoint_round_trip_bit_exact(tmp_path, make_field):
    vf = make_field(5)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(vf, a)
    loaded = load_checkpoint(a)
    assert loaded.arch == vf.arch
    np.testing.assert_array_equal(loaded.params, vf.params.astype(np.float32).astype(np.float64))
    save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(InvalidArgument):
        load_checkpoint(p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1), st.integers(0, 2))
def test_output_dimension_and_finiteness(seed, t, c):
    arch = MLPArch(d=3, cond_vocab=3, hidden=(8,), n_freq=1)
    vf = VelocityField.init(arch, np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).standard_normal((4, 3))
    out = vf.forward(x, t, c)
    assert out.shape == (4, 3)
    assert np.isfinite(out).all()
