"""Sequential dense networks with hand-written reverse mode and plain SGD.

Everything is float64. A network is treated as an immutable value: ``sgd_step``
returns a new network and never mutates its argument.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RejectedInputError, TrainingDivergedError

ACTIVATIONS = ("relu", "identity")
# checkpoint spelling of the activations
_ACT_TO_JSON = {"relu": "relu", "identity": "id"}
_JSON_TO_ACT = {"relu": "relu", "id": "identity", "identity": "identity"}


@dataclass(frozen=True)
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "identity"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise RejectedInputError(
                f"layer shapes do not agree: w{w.shape} b{b.shape}")
        if self.act not in ACTIVATIONS:
            raise RejectedInputError(f"unknown activation {self.act!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise RejectedInputError("layer parameters must be finite")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class DenseNet:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise RejectedInputError("a network needs at least one layer")
        for k, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise RejectedInputError(
                    f"layer {k} outputs {a.out_dim} values but layer {k + 1} "
                    f"expects {b.in_dim}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_params(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise RejectedInputError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise RejectedInputError("learning_rate must be > 0")
        if self.steps < 1:
            raise RejectedInputError("steps must be >= 1")
        if self.seed < 0:
            raise RejectedInputError("seed must be unsigned")


def init_dense(sizes, activations=None, rng=None, seed: int = 0) -> DenseNet:
    """Build a dense stack with Glorot-uniform weights and zero biases.

    ``sizes`` lists the widths from input to output. Hidden layers default to
    relu and the output layer to identity.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise RejectedInputError("need at least input and output sizes")
    n_layers = len(sizes) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    if len(activations) != n_layers:
        raise RejectedInputError("one activation per layer")
    rng = np.random.default_rng(seed) if rng is None else rng
    layers = []
    for fan_in, fan_out, act in zip(sizes, sizes[1:], activations):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(tuple(layers))


def _activate(z, act):
    return np.maximum(z, 0.0) if act == "relu" else z


def _check_input(net: DenseNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise RejectedInputError(
            f"input has shape {x.shape}, network expects {net.input_dim} features")
    return x


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate ``net`` on one input vector or on a batch (rows are inputs)."""
    h = _check_input(net, x)
    for layer in net.layers:
        h = _activate(h @ layer.w.T + layer.b, layer.act)
    return h


def _forward_cache(net, x):
    # keep every layer input and pre-activation for the backward sweep
    h = x
    cache = []
    for layer in net.layers:
        z = h @ layer.w.T + layer.b
        cache.append((h, z))
        h = _activate(z, layer.act)
    return h, cache


def backward(net: DenseNet, x, upstream) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradient of ``sum(upstream * forward(net, x))`` w.r.t. every parameter.

    Returns ``[(dW, db), ...]`` aligned with ``net.layers``. For a batch input
    the per-row contributions are summed.
    """
    grads, _ = backward_with_input(net, x, upstream)
    return grads


def backward_with_input(net: DenseNet, x, upstream):
    """Same as :func:`backward` but also returns d/dx."""
    x = _check_input(net, x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    g = np.asarray(upstream, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], net.output_dim):
        raise RejectedInputError(
            f"upstream gradient has shape {np.shape(upstream)}, "
            f"expected {(xb.shape[0], net.output_dim)}")
    _, cache = _forward_cache(net, xb)
    grads = []
    for layer, (h, z) in zip(reversed(net.layers), reversed(cache)):
        if layer.act == "relu":
            g = g * (z > 0)
        grads.append((g.T @ h, g.sum(axis=0)))
        g = g @ layer.w
    grads.reverse()
    dx = g[0] if single else g
    return grads, dx


def sgd_step(net: DenseNet, grads, learning_rate: float) -> DenseNet:
    """Return ``net`` with every parameter moved by ``-learning_rate * grad``."""
    if len(grads) != len(net.layers):
        raise RejectedInputError("gradient list does not match the layers")
    new_layers = []
    for layer, (dw, db) in zip(net.layers, grads):
        dw = np.asarray(dw, dtype=np.float64)
        db = np.asarray(db, dtype=np.float64)
        if dw.shape != layer.w.shape or db.shape != layer.b.shape:
            raise RejectedInputError("gradient shape does not match parameters")
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingDivergedError("non-finite gradient")
        if learning_rate == 0:
            new_layers.append(layer)
            continue
        new_layers.append(Layer(layer.w - learning_rate * dw,
                                layer.b - learning_rate * db, layer.act))
    return DenseNet(tuple(new_layers))


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, label):
    """Loss ``-log softmax(logits)[label]`` and its gradient w.r.t. ``logits``.

    Accepts a single logit vector with an int label, or a (M, C) batch with an
    int array of labels; the batch form returns per-row losses and gradients.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise RejectedInputError("need at least two classes")
    labels = np.asarray(label)
    if not np.issubdtype(labels.dtype, np.integer):
        raise RejectedInputError("labels must be integers")
    if np.any(labels < 0) or np.any(labels >= z.shape[-1]):
        raise RejectedInputError(f"label out of range for {z.shape[-1]} classes")
    logp = log_softmax(z)
    grad = np.exp(logp)
    if z.ndim == 1:
        grad[int(labels)] -= 1.0
        return float(-logp[int(labels)]), grad
    rows = np.arange(z.shape[0])
    grad[rows, labels] -= 1.0
    return -logp[rows, labels], grad


def to_checkpoint(net: DenseNet) -> dict:
    return {
        "layers": [{"w": l.w.tolist(), "b": l.b.tolist(), "act": _ACT_TO_JSON[l.act]}
                   for l in net.layers],
        "input_dim": net.input_dim,
    }


def from_checkpoint(obj: dict) -> DenseNet:
    try:
        layers = tuple(
            Layer(np.array(l["w"], dtype=np.float64).reshape(len(l["b"]), -1),
                  np.array(l["b"], dtype=np.float64), _JSON_TO_ACT[l["act"]])
            for l in obj["layers"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RejectedInputError(f"malformed network checkpoint: {exc}") from exc
    net = DenseNet(layers)
    if "input_dim" in obj and obj["input_dim"] != net.input_dim:
        raise RejectedInputError("checkpoint input_dim disagrees with first layer")
    return net


def save_net(net: DenseNet, path) -> None:
    Path(path).write_text(json.dumps(to_checkpoint(net)))


def load_net(path) -> DenseNet:
    return from_checkpoint(json.loads(Path(path).read_text()))


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays forever, reshuffling after each pass over ``n`` items."""
    if n == 0:
        raise RejectedInputError("cannot draw batches from an empty set")
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train_classifier(net: DenseNet, x, y, cfg: TrainConfig, log_every: int = 0):
    """Minimise mean softmax cross-entropy of ``forward(net, x)`` with SGD."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    batches = iterate_minibatches(len(x), cfg.batch_size, rng)
    losses = []
    for step in range(cfg.steps):
        idx = next(batches)
        out = forward(net, x[idx])
        loss, dz = softmax_cross_entropy(out, y[idx])
        mean_loss = float(loss.mean())
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}", step=step)
        try:
            net = sgd_step(net, backward(net, x[idx], dz / len(idx)), cfg.learning_rate)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"{exc} at step {step}", step=step) from exc
        if log_every and step % log_every == 0:
            losses.append((step, mean_loss))
    return net, losses
