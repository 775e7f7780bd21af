"""Small fully connected networks with hand-written gradients and Adam.

Arrays follow the row-batch convention: inputs are ``(batch, in)`` (a single
1-D vector is also accepted) and weights are stored as ``(out, in)`` so a
layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when array shapes do not chain through a network."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value reaches an optimizer or metric."""


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ShapeError("network needs at least one layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 0 and self.weights[i - 1].shape[0] != w.shape[1]:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, got {self.weights[i - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations)

    def zeros_like(self) -> "Mlp":
        return Mlp([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases],
                   self.activations)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(sizes, activations, seed=0) -> Mlp:
    """Glorot-uniform weights in ``±sqrt(6/(in+out))``, zero biases.

    ``activations`` is either one name per layer or a single name used for
    every hidden layer with an identity output layer.
    """
    sizes = list(sizes)
    n_layers = len(sizes) - 1
    if n_layers < 1:
        raise ShapeError("need at least an input and an output size")
    if isinstance(activations, str):
        activations = (activations,) * (n_layers - 1) + ("identity",)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases, tuple(activations))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(name, z, a, upstream):
    if name == "relu":
        return upstream * (z > 0)
    if name == "tanh":
        return upstream * (1.0 - a * a)
    if name == "sigmoid":
        return upstream * a * (1.0 - a)
    return upstream


def sigmoid(z):
    """Overflow-free logistic function."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(params: Mlp, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not fit a network with {params.in_dim} inputs")
    return x, single


def forward_cache(params: Mlp, x):
    """Forward pass that also returns the per-layer ``(input, pre-activation, output)`` cache."""
    h, single = _as_batch(params, x)
    cache = []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ w.T + b
        a = _act(act, z)
        cache.append((h, z, a))
        h = a
    return (h[0] if single else h), cache


def forward(params: Mlp, x) -> np.ndarray:
    return forward_cache(params, x)[0]


def backward_cache(params: Mlp, cache, upstream):
    """Gradients of ``sum(upstream * output)`` from a cache built by :func:`forward_cache`."""
    g = np.asarray(upstream, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache[-1][2].shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {cache[-1][2].shape}")
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        h, z, a = cache[i]
        g = _act_grad(params.activations[i], z, a, g)
        gw[i] = g.T @ h
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return Mlp(gw, gb, params.activations), g


def backward(params: Mlp, x, upstream):
    """Return ``(parameter gradient, input gradient)`` of ``sum(upstream * forward(params, x))``."""
    x = np.asarray(x, dtype=float)
    _, cache = forward_cache(params, x)
    grads, gx = backward_cache(params, cache, upstream)
    return grads, (gx[0] if x.ndim == 1 else gx)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mlp, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, 0, lr, beta1, beta2, eps)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step,
                         self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: Mlp, grads: Mlp, state: AdamState):
    """One bias-corrected Adam update. Mutates and returns ``(params, state)``."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer state layouts differ")
    for p, g in zip(p_arrays, g_arrays):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def mlp_to_dict(params: Mlp) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "activations": list(params.activations),
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def mlp_from_dict(data: dict) -> Mlp:
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
    weights, biases = [], []
    for layer in data["layers"]:
        weights.append(np.asarray(layer["weight"], dtype=float).reshape(layer["shape"]))
        biases.append(np.asarray(layer["bias"], dtype=float))
    return Mlp(weights, biases, tuple(data["activations"]))


def save_mlp(params: Mlp, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(mlp_to_dict(params)))


def load_mlp(path) -> Mlp:
    return mlp_from_dict(json.loads(Path(path).read_text()))
