"""Small fully-connected predictor with hand-written reverse mode and Adam.

The network maps ``(x, t, c)`` to a vector in data space.  Time enters through
sinusoidal features, the condition through a learned embedding table whose last
row is the null condition used by classifier-free guidance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    data_dim: int = 2
    time_pairs: int = 8
    n_conditions: int = 8
    cond_dim: int = 8
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "silu"

    @property
    def null_condition(self) -> int:
        return self.n_conditions

    @property
    def input_dim(self) -> int:
        return self.data_dim + 2 * self.time_pairs + self.cond_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.data_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        n = (self.n_conditions + 1) * self.cond_dim
        for i, o in self.layer_shapes():
            n += i * o + o
        return n


@dataclass
class PolicyParams:
    arch: Architecture
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat)
        if self.flat.shape != (self.arch.n_params,):
            raise ValueError(
                f"parameter vector has {self.flat.size} entries, architecture needs {self.arch.n_params}"
            )

    @property
    def n_params(self) -> int:
        return self.arch.n_params

    def copy(self) -> PolicyParams:
        return PolicyParams(self.arch, self.flat.copy())

    def views(self):
        """(embedding table, [(W, b), ...]) as views into ``flat``."""
        return _split(self.arch, self.flat)


def _split(arch: Architecture, flat: np.ndarray):
    off = 0
    n_emb = (arch.n_conditions + 1) * arch.cond_dim
    emb = flat[:n_emb].reshape(arch.n_conditions + 1, arch.cond_dim)
    off = n_emb
    layers = []
    for i, o in arch.layer_shapes():
        W = flat[off : off + i * o].reshape(i, o)
        off += i * o
        b = flat[off : off + o]
        off += o
        layers.append((W, b))
    return emb, layers


def init_params(arch: Architecture, seed: int = 0, dtype=np.float64) -> PolicyParams:
    rng = np.random.Generator(np.random.Philox(seed))
    flat = np.zeros(arch.n_params, dtype=dtype)
    emb, layers = _split(arch, flat)
    emb[...] = rng.normal(0.0, 1.0, emb.shape)
    for idx, (W, b) in enumerate(layers):
        scale = 1.0 / math.sqrt(W.shape[0])
        if idx == len(layers) - 1:
            scale *= 0.1
        W[...] = rng.normal(0.0, scale, W.shape)
    return PolicyParams(arch, flat)


def time_features(t, pairs: int, dtype=np.float64) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=dtype))
    freqs = np.exp(-math.log(10000.0) * np.arange(pairs, dtype=dtype) / pairs).astype(dtype)
    ang = (dtype(1000.0) * t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _act(name, z):
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return z * s, s
    if name == "tanh":
        h = np.tanh(z)
        return h, h
    if name == "identity":
        return z, None
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, aux):
    if name == "silu":
        return aux * (1.0 + z * (1.0 - aux))
    if name == "tanh":
        return 1.0 - aux * aux
    return np.ones_like(z)


@dataclass
class ForwardCache:
    cond: np.ndarray
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    aux: list = field(default_factory=list)


def forward(params: PolicyParams, x, t, c, dtype=None):
    """Batched forward pass; returns ``(output, cache)``.

    ``x`` is ``(B, data_dim)``; ``t`` and ``c`` are scalars or length-B vectors.
    ``dtype`` selects evaluation precision (defaults to the parameter dtype).
    """
    arch = params.arch
    dtype = np.dtype(dtype or params.flat.dtype).type
    flat = params.flat.astype(dtype, copy=False)
    emb, layers = _split(arch, flat)
    x = np.atleast_2d(np.asarray(x, dtype=dtype))
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=dtype), (B,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (B,))
    if np.any(c < 0) or np.any(c > arch.null_condition):
        raise ValueError(f"condition ids must lie in [0, {arch.null_condition}]")
    h = np.concatenate([x, time_features(t, arch.time_pairs, dtype), emb[c]], axis=1)
    cache = ForwardCache(cond=np.array(c))
    for idx, (W, b) in enumerate(layers):
        cache.inputs.append(h)
        z = h @ W + b
        if idx == len(layers) - 1:
            h = z
        else:
            cache.pre.append(z)
            h, aux = _act(arch.activation, z)
            cache.aux.append(aux)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite network output")
    return h, cache


def predict(params: PolicyParams, x, t, c, dtype=None) -> np.ndarray:
    return forward(params, x, t, c, dtype)[0]


def backward(params: PolicyParams, cache: ForwardCache, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * output)`` w.r.t. the flat parameter vector."""
    arch = params.arch
    grad = np.zeros(arch.n_params, dtype=np.float64)
    g_emb, g_layers = _split(arch, grad)
    _, layers = _split(arch, params.flat.astype(np.float64, copy=False))
    delta = np.asarray(upstream, dtype=np.float64)
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        gW, gb = g_layers[idx]
        h_in = cache.inputs[idx]
        gW += h_in.T @ delta
        gb += delta.sum(axis=0)
        delta = delta @ W.T
        if idx > 0:
            delta = delta * _act_grad(arch.activation, cache.pre[idx - 1], cache.aux[idx - 1])
    lo = arch.data_dim + 2 * arch.time_pairs
    np.add.at(g_emb, cache.cond, delta[:, lo:])
    return grad


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: PolicyParams, **kw) -> OptimizerState:
        z = np.zeros(params.n_params)
        return cls(m=z, v=z.copy(), **kw)


def adam_step(params: PolicyParams, grads, state: OptimizerState):
    """One Adam update; returns ``(new_params, new_state)`` and leaves inputs untouched."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError("gradient shape does not match optimizer state")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    flat = params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, step, state.lr, state.beta1, state.beta2, state.eps)
    return PolicyParams(params.arch, flat), new_state


def save_checkpoint(params: PolicyParams, path) -> None:
    arch = asdict(params.arch)
    arch["hidden"] = list(arch["hidden"])
    doc = {
        "version": CHECKPOINT_VERSION,
        "architecture": arch,
        "dtype": str(params.flat.dtype),
        "params": [float(v) for v in params.flat],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> PolicyParams:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    arch = dict(doc["architecture"])
    arch["hidden"] = tuple(arch["hidden"])
    flat = np.array(doc["params"], dtype=np.dtype(doc.get("dtype", "float64")))
    return PolicyParams(Architecture(**arch), flat)
