"""Small dense networks with exact backprop, SGD/Adam training and gradient checks.

Inputs may be a single vector (shape ``(n_in,)``) or a batch (``(B, n_in)``);
losses are sums over the batch so gradients add across samples.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import write_text_atomic

log = logging.getLogger(__name__)

ACTIVATIONS = ("linear", "tanh", "relu")
MODEL_MAGIC = "condattr-densenet"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class Layer:
    W: np.ndarray  # (n_out, n_in)
    b: np.ndarray  # (n_out,)
    activation: str = "linear"


@dataclass
class DenseNet:
    layers: list

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ValueError("layer dimensions do not chain")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @classmethod
    def build(cls, sizes, activations, seed: int = 0) -> "DenseNet":
        """Glorot-uniform weights, zero biases. ``activations`` has len(sizes)-1 entries."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
            lim = math.sqrt(6.0 / (n_in + n_out))
            layers.append(Layer(rng.uniform(-lim, lim, (n_out, n_in)), np.zeros(n_out), act))
        return cls(layers)

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(float)
    return np.ones_like(z)


def forward(net: DenseNet, x: np.ndarray):
    """Return (output, cache). The cache holds (input, pre-activation, activation) per layer."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != net.input_dim:
        raise ValueError(f"input width {a.shape[1]} != net input_dim {net.input_dim}")
    cache = []
    for layer in net.layers:
        z = a @ layer.W.T + layer.b
        out = _act(layer.activation, z)
        cache.append((a, z, out))
        a = out
    return (a[0] if single else a), (single, cache)


def backward(net: DenseNet, cache, grad_out: np.ndarray):
    """Reverse-mode pass. Returns ``(param_grads, grad_input)``;
    param_grads is a list of (dW, db) per layer."""
    single, layers_cache = cache
    g = np.asarray(grad_out, dtype=float)
    if single:
        g = g[None, :]
    if g.shape != layers_cache[-1][2].shape:
        raise ValueError(f"output gradient shape {g.shape} != {layers_cache[-1][2].shape}")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        a_in, z, a_out = layers_cache[i]
        gz = g * _act_grad(layer.activation, z, a_out)
        grads[i] = (gz.T @ a_in, gz.sum(axis=0))
        g = gz @ layer.W
    return grads, (g[0] if single else g)


# ------------------------------------------------------------------------ losses

def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Sum of squared errors and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.sum(diff * diff)), 2.0 * diff


# --------------------------------------------------------------------- optimizer

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be non-negative/positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    def __init__(self, params: list[np.ndarray], config: TrainConfig):
        self.params = params
        self.cfg = config
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            for p, g in zip(self.params, grads):
                p -= cfg.learning_rate * g
            return
        self.t += 1
        c1 = 1 - cfg.beta1 ** self.t
        c2 = 1 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def flat_grads(grads) -> list[np.ndarray]:
    out = []
    for dW, db in grads:
        out += [dW, db]
    return out


def train(net: DenseNet, inputs: np.ndarray, loss: Callable = mse_loss,
          config: Optional[TrainConfig] = None, targets: Optional[np.ndarray] = None):
    """Minibatch training in place. Gradients are averaged over the batch.

    ``loss(pred, target) -> (value, d value / d pred)`` with value summed over the batch.
    Returns ``(net, history)`` where history holds the per-sample epoch-mean loss.
    """
    config = config or TrainConfig()
    X = np.asarray(inputs, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set must be a non-empty 2-D array")
    Y = X if targets is None else np.asarray(targets, dtype=float)
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(net.params(), config)
    n = X.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            pred, cache = forward(net, X[idx])
            value, g = loss(pred, Y[idx])
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            total += value
            grads, _ = backward(net, cache, g / len(idx))
            opt.step(flat_grads(grads))
        history.append(total / n)
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return net, history


# --------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: list  # per parameter array
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_grads(objective: Callable[[], float], params: list[np.ndarray], h: float) -> list:
    """Central differences of ``objective()`` w.r.t. every entry of ``params`` (mutated and restored)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = objective()
            p[i] = old - h
            fm = objective()
            p[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def compare_grads(analytic: list, numeric: list, tolerance: float) -> GradCheckReport:
    errs = [float(rel_error(a, n).max()) if a.size else 0.0 for a, n in zip(analytic, numeric)]
    return GradCheckReport(max(errs) if errs else 0.0, errs, tolerance)


def finite_diff_check(net: DenseNet, loss: Callable, sample, h: float = 1e-5,
                      tolerance: float = 1e-4, target=None,
                      grad_fn: Optional[Callable] = None) -> GradCheckReport:
    """Compare backprop against central differences on one sample (or batch).

    ``grad_fn(net, x, target)`` may override the analytic gradient (used for
    negative controls); it must return per-layer (dW, db) pairs.
    """
    x = np.asarray(sample, dtype=float)
    y = x if target is None else np.asarray(target, dtype=float)

    def objective():
        return loss(forward(net, x)[0], y)[0]

    if grad_fn is None:
        pred, cache = forward(net, x)
        grads, _ = backward(net, cache, loss(pred, y)[1])
    else:
        grads = grad_fn(net, x, y)
    analytic = flat_grads(grads)
    numeric = numeric_grads(objective, net.params(), h)
    return compare_grads(analytic, numeric, tolerance)


# ------------------------------------------------------------------ persistence

def net_to_dict(net: DenseNet) -> dict:
    return {"layers": [{"shape": list(l.W.shape), "activation": l.activation,
                        "weights": l.W.ravel().tolist(), "bias": l.b.tolist()}
                       for l in net.layers]}


def net_from_dict(obj: dict) -> DenseNet:
    layers = []
    for item in obj["layers"]:
        shape = tuple(item["shape"])
        W = np.array(item["weights"], dtype=float).reshape(shape)
        layers.append(Layer(W, np.array(item["bias"], dtype=float), item["activation"]))
    return DenseNet(layers)


def save_net(net: DenseNet, path) -> None:
    doc = {"format": MODEL_MAGIC, "version": MODEL_VERSION, **net_to_dict(net)}
    write_text_atomic(path, json.dumps(doc))


def load_net(path) -> DenseNet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_MAGIC:
        raise ValueError(f"{path}: not a {MODEL_MAGIC} file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {doc.get('version')}")
    return net_from_dict(doc)
