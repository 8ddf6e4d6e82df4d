"""A small smooth MLP classifier and its weight-gradient map.

Flat weight layout (version 1): for each layer in order, the weight
matrix of shape ``(out, in)`` in row-major order followed by its bias of
length ``out``.  Hidden layers apply the activation; the last layer emits
raw logits, which feed a softmax cross-entropy scaled by
``NetSpec.loss_scale``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, ParseError
from .tensorcore import SeededRng, as_vector

__all__ = [
    "NetSpec",
    "Weights",
    "Sample",
    "NetGradientMap",
    "init_weights",
    "forward",
    "loss_ce",
    "grad_weights",
    "grad_weights_batch",
    "train_sgd",
    "predict",
    "save_weights",
    "load_weights",
]

LAYOUT_VERSION = 1
ACTIVATIONS = ("tanh", "softplus")


@dataclass(frozen=True)
class NetSpec:
    """Architecture of the classifier.

    ``loss_scale`` multiplies the client's cross-entropy objective; the
    default of 1 is plain cross-entropy.
    """

    layer_sizes: tuple
    activation: str = "tanh"
    loss_scale: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ContractError("a network needs at least input and output sizes")
        if any(s < 1 for s in sizes):
            raise ContractError("layer sizes must be positive")
        if sizes[-1] < 2:
            raise ContractError("a classifier needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}")
        if not (self.loss_scale > 0 and math.isfinite(self.loss_scale)):
            raise ContractError("loss_scale must be positive and finite")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self):
        return list(zip(self.layer_sizes[1:], self.layer_sizes[:-1]))

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_out, fan_in in self.shapes)


@dataclass(frozen=True)
class Weights:
    spec: NetSpec
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        flat = as_vector(self.flat, "flat weights")
        if flat.size != self.spec.n_params:
            raise DimensionError(
                f"expected {self.spec.n_params} parameters, got {flat.size}"
            )
        flat = flat.copy()
        flat.flags.writeable = False
        object.__setattr__(self, "flat", flat)

    def layers(self):
        """List of ``(W, b)`` read-only views into ``flat``."""
        out, pos = [], 0
        for fan_out, fan_in in self.spec.shapes:
            W = self.flat[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in)
            pos += fan_out * fan_in
            b = self.flat[pos : pos + fan_out]
            pos += fan_out
            out.append((W, b))
        return out

    def split(self, vec):
        """Split an n-vector laid out like ``flat`` into per-layer ``(W, b)``."""
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for fan_out, fan_in in self.spec.shapes:
            W = vec[pos : pos + fan_out * fan_in].reshape(fan_out, fan_in)
            pos += fan_out * fan_in
            out.append((W, vec[pos : pos + fan_out]))
            pos += fan_out
        return out

    def with_loss_scale(self, scale: float) -> "Weights":
        return Weights(replace(self.spec, loss_scale=scale), self.flat)


@dataclass(frozen=True)
class Sample:
    x: np.ndarray = field(repr=False)
    y: int

    def __post_init__(self):
        x = as_vector(self.x, "sample image")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", int(self.y))
        if self.y < 0:
            raise ContractError("label must be non-negative")


def _act(z, kind):
    if kind == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    # softplus(z) = log(1 + e^z), derivative is the logistic function
    a = np.logaddexp(0.0, z)
    return a, 0.5 * (1.0 + np.tanh(0.5 * z))


def init_weights(spec: NetSpec, rng: SeededRng) -> Weights:
    """Glorot-uniform matrices, zero biases."""
    parts = []
    for fan_out, fan_in in spec.shapes:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return Weights(spec, np.concatenate(parts))


def _check_inputs(w: Weights, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.ndim != 2 or X2.shape[1] != w.spec.input_dim:
        raise DimensionError(
            f"input must have {w.spec.input_dim} features, got shape {X.shape}"
        )
    return X2, single


def _forward_cache(w: Weights, X):
    acts, derivs = [X], []
    a = X
    layers = w.layers()
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if i < len(layers) - 1:
            a, da = _act(z, w.spec.activation)
            acts.append(a)
            derivs.append(da)
        else:
            a = z
    return acts, derivs, a


def forward(w: Weights, x) -> np.ndarray:
    """Logits for one input (1-D) or a batch of inputs (2-D)."""
    X, single = _check_inputs(w, x)
    logits = _forward_cache(w, X)[2]
    return logits[0] if single else logits


def predict(w: Weights, X) -> np.ndarray:
    return np.argmax(np.atleast_2d(forward(w, X)), axis=1)


def _log_softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def loss_ce(logits, y: int) -> float:
    """Softmax cross-entropy ``-log softmax(logits)[y]``."""
    z = as_vector(logits, "logits")
    if not 0 <= int(y) < z.size:
        raise ContractError(f"label {y} out of range for {z.size} classes")
    return float(-_log_softmax(z)[int(y)])


def _labels(y, batch, n_classes):
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (batch,))
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return y


def _backprop(w: Weights, X, y):
    """Per-layer factors ``(delta_l, a_{l-1})`` of the per-sample gradients.

    The gradient of sample b with respect to layer l's matrix is the outer
    product ``delta_l[b] a_{l-1}[b]^T`` and with respect to its bias is
    ``delta_l[b]``.  Also returns the per-sample losses.
    """
    acts, derivs, logits = _forward_cache(w, X)
    y = _labels(y, X.shape[0], w.spec.n_classes)
    logp = _log_softmax(logits)
    rows = np.arange(X.shape[0])
    losses = -w.spec.loss_scale * logp[rows, y]
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta *= w.spec.loss_scale
    layers = w.layers()
    deltas = [None] * len(layers)
    deltas[-1] = delta
    for i in range(len(layers) - 1, 0, -1):
        delta = (delta @ layers[i][0]) * derivs[i - 1]
        deltas[i - 1] = delta
    return list(zip(deltas, acts)), losses


def _assemble(factors):
    batch = factors[0][0].shape[0]
    parts = []
    for delta, a in factors:
        parts.append((delta[:, :, None] * a[:, None, :]).reshape(batch, -1))
        parts.append(delta)
    return np.concatenate(parts, axis=1)


def grad_weights_batch(w: Weights, X, y) -> np.ndarray:
    """Per-sample flat weight gradients, shape ``(batch, n)``."""
    X, _ = _check_inputs(w, X)
    factors, _ = _backprop(w, X, y)
    return _assemble(factors)


def grad_weights(w: Weights, s: Sample) -> np.ndarray:
    """Flat gradient of the (scaled) cross-entropy with respect to the weights."""
    return grad_weights_batch(w, s.x[None, :], s.y)[0]


class NetGradientMap:
    """The map ``x -> g_w(x, y)`` for a fixed network and label.

    Besides materialized gradients it offers inner products and squared
    norms of batches of gradients computed from the backprop factors,
    which avoids building a ``(batch, n)`` array in the inner loops of
    the attack and the Hessian-vector products.
    """

    def __init__(self, w: Weights, y: int):
        self.weights = w
        self.y = int(y)
        _labels(self.y, 1, w.spec.n_classes)
        self.d = w.spec.input_dim
        self.n = w.spec.n_params

    def _factors(self, X):
        X, _ = _check_inputs(self.weights, X)
        return _backprop(self.weights, X, self.y)[0]

    def grad(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        g = _assemble(self._factors(X))
        return g[0] if X.ndim == 1 else g

    def dot(self, X, u) -> np.ndarray:
        """``g(x_b) . u`` for every row of ``X``."""
        out = 0.0
        for (delta, a), (U, ub) in zip(self._factors(X), self.weights.split(u)):
            out = out + np.einsum("bi,bi->b", delta @ U, a) + delta @ ub
        return out

    def dot_sqnorm(self, X, u):
        """``(g(x_b) . u, ||g(x_b)||^2)`` sharing one forward/backward pass."""
        dots, sq = 0.0, 0.0
        for (delta, a), (U, ub) in zip(self._factors(X), self.weights.split(u)):
            dots = dots + np.einsum("bi,bi->b", delta @ U, a) + delta @ ub
            sq = sq + np.einsum("bi,bi->b", delta, delta) * (
                np.einsum("bi,bi->b", a, a) + 1.0
            )
        return dots, sq

    def sqnorm(self, X) -> np.ndarray:
        sq = 0.0
        for delta, a in self._factors(X):
            sq = sq + np.einsum("bi,bi->b", delta, delta) * (
                np.einsum("bi,bi->b", a, a) + 1.0
            )
        return sq


def train_sgd(
    spec: NetSpec,
    data,
    epochs: int,
    lr: float,
    rng: SeededRng,
    batch_size: int = 1,
    history=None,
) -> Weights:
    """Train with plain minibatch SGD, reshuffling every epoch.

    If ``history`` is a list, the mean training loss of each epoch (measured
    on the fly) is appended to it.
    """
    data = list(data)
    if not data:
        raise ContractError("training data must be nonempty")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    X = np.stack([s.x for s in data])
    Y = np.array([s.y for s in data], dtype=np.int64)
    w = init_weights(spec, rng.child(0))
    flat = w.flat.copy()
    shuffle_rng = rng.child(1)
    for _ in range(epochs):
        order = shuffle_rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            cur = Weights(spec, flat)
            factors, losses = _backprop(cur, X[idx], Y[idx])
            total += float(losses.sum())
            grad = _assemble(factors).mean(axis=0)
            flat -= lr * grad
        if not np.all(np.isfinite(flat)):
            raise ContractError("training diverged; lower the learning rate")
        if history is not None:
            history.append(total / len(data))
    return Weights(spec, flat)


def save_weights(w: Weights, path, seed=None):
    """Write ``<path>.json`` (header) and ``<path>.bin`` (little-endian f8)."""
    path = Path(path)
    header = {
        "layout_version": LAYOUT_VERSION,
        "layer_sizes": list(w.spec.layer_sizes),
        "activation": w.spec.activation,
        "loss_scale": w.spec.loss_scale,
        "n_params": w.spec.n_params,
        "seed": seed,
        "data_file": path.with_suffix(".bin").name,
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(w.flat.astype("<f8").tobytes())
    return path.with_suffix(".json")


def load_weights(path) -> Weights:
    path = Path(path).with_suffix(".json")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad weights header {path}: {exc.msg}", exc.pos) from exc
    if header.get("layout_version") != LAYOUT_VERSION:
        raise ParseError(f"unsupported layout version {header.get('layout_version')}")
    spec = NetSpec(
        tuple(header["layer_sizes"]),
        header["activation"],
        float(header.get("loss_scale", 1.0)),
    )
    raw = (path.parent / header["data_file"]).read_bytes()
    if len(raw) != 8 * spec.n_params:
        raise ParseError(
            f"weights file holds {len(raw)} bytes, expected {8 * spec.n_params}",
            min(len(raw), 8 * spec.n_params),
        )
    return Weights(spec, np.frombuffer(raw, dtype="<f8").astype(np.float64))
