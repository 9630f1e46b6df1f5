"""Conditional velocity field ``v(x, t, c)`` as a small MLP on a flat parameter vector.

Input features are ``[x ; t, sin(k pi t), cos(k pi t) for k=1..n_freq ; onehot(c)]``.
All arithmetic is float64.  Checkpoints store the parameters as little-endian
float32 after a small binary header (see :func:`save_checkpoint`).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import InvalidArgument, NumericError

ACTIVATIONS = ("tanh", "silu")
MAGIC = b"OPDF"
VERSION = 1


@dataclass(frozen=True)
class MLPArch:
    d: int = 2
    cond_vocab: int = 3
    hidden: tuple = (64, 64, 64)
    activation: str = "silu"
    n_freq: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"activation must be one of {ACTIVATIONS}")
        if self.d < 1 or self.cond_vocab < 1 or not self.hidden:
            raise InvalidArgument(f"bad architecture {self}")

    @property
    def n_time_features(self) -> int:
        return 1 + 2 * self.n_freq

    @property
    def d_in(self) -> int:
        return self.d + self.n_time_features + self.cond_vocab

    @property
    def layer_shapes(self) -> list:
        widths = [self.d_in, *self.hidden, self.d]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


# -- MLP kernels ---------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def mlp_forward(weights, biases, x, activation):
    """Return ``(out, cache)``; weights are ``(fan_in, fan_out)``."""
    hs, zs = [x], []
    h = x
    for W, b in zip(weights[:-1], biases[:-1]):
        z = h @ W + b
        h = np.tanh(z) if activation == "tanh" else z * _sigmoid(z)
        zs.append(z)
        hs.append(h)
    return h @ weights[-1] + biases[-1], (hs, zs)


def mlp_backward(weights, cache, grad_out, activation, gweights, gbiases):
    """Accumulate parameter gradients into ``gweights``/``gbiases`` in place."""
    hs, zs = cache
    g = grad_out
    for layer in range(len(weights) - 1, -1, -1):
        gweights[layer] += hs[layer].T @ g
        gbiases[layer] += g.sum(axis=0)
        if layer == 0:
            break
        z, h = zs[layer - 1], hs[layer]
        if activation == "tanh":
            dact = 1.0 - h * h
        else:
            s = _sigmoid(z)
            dact = s * (1.0 + z * (1.0 - s))
        g = (g @ weights[layer].T) * dact


def _unflatten(arch: MLPArch, flat: np.ndarray):
    weights, biases = [], []
    k = 0
    for i, o in arch.layer_shapes:
        weights.append(flat[k:k + i * o].reshape(i, o))
        k += i * o
        biases.append(flat[k:k + o])
        k += o
    return weights, biases


def time_features(t, n_freq: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[..., None]
    k = np.arange(1, n_freq + 1, dtype=np.float64) * np.pi
    return np.concatenate([t, np.sin(k * t), np.cos(k * t)], axis=-1)


# -- velocity field -------------------------------------------------------------

@dataclass(eq=False)
class VelocityField:
    arch: MLPArch
    params: np.ndarray
    fwd_evals: int = field(default=0, compare=False)

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise InvalidArgument(
                f"expected {self.arch.n_params} parameters, got shape {self.params.shape}")

    @classmethod
    def init(cls, arch: MLPArch, rng: np.random.Generator) -> "VelocityField":
        chunks = []
        for i, o in arch.layer_shapes:
            bound = 1.0 / np.sqrt(i)
            chunks.append(rng.uniform(-bound, bound, size=i * o))
            chunks.append(rng.uniform(-bound, bound, size=o))
        return cls(arch, np.concatenate(chunks))

    @classmethod
    def zeros(cls, arch: MLPArch) -> "VelocityField":
        return cls(arch, np.zeros(arch.n_params))

    def copy(self) -> "VelocityField":
        return VelocityField(self.arch, self.params.copy())

    def digest(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()

    def features(self, x, t, c):
        """Build the network input; returns ``(inputs, squeeze)``."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        n, d = x.shape
        if d != self.arch.d:
            raise InvalidArgument(f"state dimension {d} != model dimension {self.arch.d}")
        c = np.broadcast_to(np.asarray(c), (n,))
        if c.size and (c.min() < 0 or c.max() >= self.arch.cond_vocab
                       or not np.issubdtype(c.dtype, np.integer)):
            raise InvalidArgument(f"condition ids must be integers in [0, {self.arch.cond_vocab})")
        tf = np.broadcast_to(time_features(t, self.arch.n_freq), (n, self.arch.n_time_features))
        onehot = np.zeros((n, self.arch.cond_vocab))
        onehot[np.arange(n), c] = 1.0
        return np.concatenate([x, tf, onehot], axis=1), squeeze

    def forward(self, x, t, c) -> np.ndarray:
        inp, squeeze = self.features(x, t, c)
        self.fwd_evals += inp.shape[0]
        w, b = _unflatten(self.arch, self.params)
        out, _ = mlp_forward(w, b, inp, self.arch.activation)
        return out[0] if squeeze else out

    __call__ = forward


class Tracked:
    """Gradient-recording view of a :class:`VelocityField`.

    ``forward`` has the same signature but returns a :class:`Tensor` wired to
    ``self.params``.
    """

    def __init__(self, vf: VelocityField):
        self.vf = vf
        self.arch = vf.arch
        self.params = Tensor(vf.params, requires_grad=True)

    def forward(self, x, t, c) -> Tensor:
        vf, arch = self.vf, self.arch
        inp, squeeze = vf.features(x, t, c)
        vf.fwd_evals += inp.shape[0]
        w, b = _unflatten(arch, vf.params)
        out, cache = mlp_forward(w, b, inp, arch.activation)

        def back(g):
            gflat = np.zeros(arch.n_params)
            gw, gb = _unflatten(arch, gflat)
            mlp_backward(w, cache, g.reshape(out.shape), arch.activation, gw, gb)
            return (gflat,)

        node = Tensor(out, (self.params,), back)
        return node.reshape(-1) if squeeze else node

    __call__ = forward


@dataclass
class ParamGradient:
    grad: np.ndarray
    value: float = 0.0


def grad_scalar_loss(vf: VelocityField, loss_closure, context=None) -> ParamGradient:
    """Exact reverse-mode gradient of ``loss_closure(tracked_vf)`` w.r.t. ``vf.params``.

    The closure receives a :class:`Tracked` wrapper and must return a scalar
    (a :class:`Tensor`, or a plain number if it never calls ``forward``).
    """
    tracked = Tracked(vf)
    loss = loss_closure(tracked)
    if not isinstance(loss, Tensor):
        val = float(loss)
        if not np.isfinite(val):
            raise NumericError(f"non-finite loss {val}", step=context)
        return ParamGradient(np.zeros(vf.arch.n_params), val)
    if loss.data.size != 1:
        raise InvalidArgument(f"loss must be scalar, got shape {loss.shape}")
    val = float(loss.data)
    if not np.isfinite(val):
        raise NumericError(f"non-finite loss {val}", step=context)
    loss.backward()
    grad = tracked.params.grad
    if grad is None:
        grad = np.zeros(vf.arch.n_params)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient", step=context)
    return ParamGradient(grad, val)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(vf: VelocityField, path) -> None:
    """Binary layout (all little-endian):

    ``b"OPDF"``, u32 version, u32 d, u32 cond_vocab, u32 n_freq, u32 activation
    index, u32 n_layers, n_layers x (u32 fan_in, u32 fan_out), then float32 params.
    """
    arch = vf.arch
    shapes = arch.layer_shapes
    header = MAGIC + struct.pack(
        "<6I", VERSION, arch.d, arch.cond_vocab, arch.n_freq,
        ACTIVATIONS.index(arch.activation), len(shapes))
    header += b"".join(struct.pack("<2I", i, o) for i, o in shapes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vf.params.astype("<f4").tobytes())


def load_checkpoint(path) -> VelocityField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise InvalidArgument(f"{path}: not a velocity-field checkpoint")
    version, d, vocab, n_freq, act, n_layers = struct.unpack_from("<6I", blob, 4)
    if version != VERSION:
        raise InvalidArgument(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 24
    shapes = [struct.unpack_from("<2I", blob, off + 8 * k) for k in range(n_layers)]
    off += 8 * n_layers
    arch = MLPArch(d=d, cond_vocab=vocab, hidden=tuple(o for _, o in shapes[:-1]),
                   activation=ACTIVATIONS[act], n_freq=n_freq)
    if arch.layer_shapes != [tuple(s) for s in shapes]:
        raise InvalidArgument(f"{path}: inconsistent layer shapes {shapes}")
    params = np.frombuffer(blob, dtype="<f4", offset=off)
    if params.size != arch.n_params:
        raise InvalidArgument(f"{path}: expected {arch.n_params} params, found {params.size}")
    return VelocityField(arch, params.astype(np.float64))
