"""Minimal dense-network engine: forward, analytic backward, Adam.

Everything is float64 numpy. Nets are plain dataclasses so trained nets can
be treated as immutable values and shared across sessions; only the trainer
mutates weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, NonFiniteGradientError

ACTIVATIONS = ("relu", "tanh", "identity")

NET_FORMAT = "densenet"
NET_VERSION = 1


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray | None  # (out,), None on bias-free nets
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class DenseNet:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def bias_free(self) -> bool:
        return all(layer.b is None for layer in self.layers)

    def params(self) -> list[np.ndarray]:
        """Flat parameter list, weights then bias per layer, in layer order."""
        out = []
        for layer in self.layers:
            out.append(layer.w)
            if layer.b is not None:
                out.append(layer.b)
        return out


def init_net(dims, activations, seed=0, bias_free=False) -> DenseNet:
    """Uniform init in +-1/sqrt(fan_in), seeded.

    dims: (input_dim, hidden..., output_dim); activations: one per layer.
    """
    dims = list(dims)
    activations = list(activations)
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = None if bias_free else rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(w=w, b=b, activation=act))
    return DenseNet(layers=layers)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _as_batch(x: np.ndarray, dim: int, what: str):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatchError(f"{what}: expected (*, {dim}), got {x.shape}")
    return x, squeeze


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the net on x of shape (n,) or (batch, n)."""
    y, _ = forward_cached(net, x)
    return y


def forward_cached(net: DenseNet, x: np.ndarray):
    """Forward pass keeping per-layer inputs/activations for backward."""
    h, squeeze = _as_batch(x, net.input_dim, "forward input")
    inputs, preacts, acts = [], [], []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.w.T
        if layer.b is not None:
            z = z + layer.b
        h = _activate(z, layer.activation)
        preacts.append(z)
        acts.append(h)
    cache = (inputs, preacts, acts, squeeze)
    return (h[0] if squeeze else h), cache


def backward(net: DenseNet, x: np.ndarray, upstream: np.ndarray):
    """Exact gradients of sum(upstream * forward(x)) w.r.t. params and x.

    Returns (param_grads, input_grad) where param_grads is a list of
    (dw, db) per layer (db is None on bias-free layers). Batched upstream
    accumulates parameter gradients over the batch.
    """
    _, cache = forward_cached(net, x)
    return backward_from_cache(net, cache, upstream)


def backward_from_cache(net: DenseNet, cache, upstream: np.ndarray):
    inputs, preacts, acts, squeeze = cache
    g, _ = _as_batch(upstream, net.output_dim, "upstream grad")
    if g.shape[0] != inputs[0].shape[0]:
        raise DimensionMismatchError(
            f"upstream batch {g.shape[0]} != input batch {inputs[0].shape[0]}")
    param_grads: list[tuple[np.ndarray, np.ndarray | None]] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * _activate_grad(preacts[i], acts[i], layer.activation)
        dw = dz.T @ inputs[i]
        db = dz.sum(axis=0) if layer.b is not None else None
        param_grads[i] = (dw, db)
        g = dz @ layer.w
    return param_grads, (g[0] if squeeze else g)


def flatten_grads(net: DenseNet, param_grads) -> list[np.ndarray]:
    """Order param grads to match net.params()."""
    out = []
    for layer, (dw, db) in zip(net.layers, param_grads):
        out.append(dw)
        if layer.b is not None:
            out.append(db)
    return out


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected adaptive-moment update, in place on params.

    Rejects non-finite gradients without touching params or moments.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatchError("params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionMismatchError(f"grad shape {np.shape(g)} != param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; step rejected")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Checkpoint format: versioned JSON
# ---------------------------------------------------------------------------

def net_to_dict(net: DenseNet) -> dict:
    return {
        "format": NET_FORMAT,
        "version": NET_VERSION,
        "bias_free": net.bias_free,
        "layers": [
            {
                "out": int(layer.w.shape[0]),
                "in": int(layer.w.shape[1]),
                "activation": layer.activation,
                "w": layer.w.ravel().tolist(),
                "b": None if layer.b is None else layer.b.tolist(),
            }
            for layer in net.layers
        ],
    }


def net_from_dict(d: dict) -> DenseNet:
    if d.get("format") != NET_FORMAT:
        raise ValueError(f"not a {NET_FORMAT} checkpoint")
    if d.get("version") != NET_VERSION:
        raise ValueError(f"unsupported {NET_FORMAT} version {d.get('version')}")
    layers = []
    for spec in d["layers"]:
        w = np.asarray(spec["w"], dtype=np.float64).reshape(spec["out"], spec["in"])
        b = None if spec["b"] is None else np.asarray(spec["b"], dtype=np.float64)
        layers.append(Layer(w=w, b=b, activation=spec["activation"]))
    net = DenseNet(layers=layers)
    if d["bias_free"] and not net.bias_free:
        raise ValueError("checkpoint flagged bias_free but carries biases")
    return net


def save_net(net: DenseNet, path) -> None:
    with open(path, "w") as f:
        json.dump(net_to_dict(net), f)


def load_net(path) -> DenseNet:
    with open(path) as f:
        return net_from_dict(json.load(f))
