"""Training a gating network over frozen experts under a bias vector ``b``.

Two methods:

``soft_regularization``
    Each input goes to its argmax expert. The loss adds
    ``-w_bias * log(1 - ||u - b||_2 / sqrt(2))`` where ``u`` is the batch mean
    of the soft gates.
``bias_enforcement``
    Each batch is partitioned so expert ``n`` receives exactly ``K_n`` inputs
    (largest-remainder rounding of ``M * b_n``) and only the task loss is used.

In both cases the mixture output for input ``i`` routed to expert ``n`` is
``G[i, n] * E_n(P_n(x_i))`` where ``E_n`` emits class logits, and gradients reach
the gating weights only through the retained gate value.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RejectedInputError, TrainingDivergedError
from .gating import selection_frequency, soft_gate, utility
from .nn import (DenseNet, TrainConfig, backward, forward, from_checkpoint, init_dense,
                 iterate_minibatches, sgd_step, softmax, softmax_cross_entropy,
                 to_checkpoint)
from .synth import Dataset, ExpertSpec, expert_logits, load_expert

METHODS = ("soft_regularization", "bias_enforcement")
ROUTINGS = ("per_input_argmax", "batch_enforced")
SQRT2 = math.sqrt(2.0)


def as_bias(b, n: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """Validate a bias vector: entries in [0, 1] summing to one."""
    b = np.asarray(b, dtype=np.float64).ravel()
    if n is not None and b.size != n:
        raise RejectedInputError(f"bias has {b.size} entries for {n} experts")
    if b.size == 0 or not np.all(np.isfinite(b)):
        raise RejectedInputError("bias must be a nonempty finite vector")
    if np.any(b < -tol) or np.any(b > 1 + tol) or abs(b.sum() - 1.0) > tol:
        raise RejectedInputError(f"bias {b.tolist()} is not on the probability simplex")
    return np.clip(b, 0.0, 1.0)


@dataclass(frozen=True)
class BiasLossConfig:
    w_bias: float = 1.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if not self.w_bias >= 0:
            raise ConfigurationError("w_bias must be >= 0")
        if not 0 < self.epsilon < 1:
            raise ConfigurationError("epsilon must be in (0, 1)")


def bias_loss(u, b, cfg: BiasLossConfig = BiasLossConfig()) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/du for the utility/bias mismatch penalty.

    The log argument is floored at ``cfg.epsilon``; where the floor is active
    the gradient is zero. At ``u == b`` the (non-differentiable) norm is given
    the zero subgradient.
    """
    u = np.asarray(u, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if u.shape != b.shape:
        raise RejectedInputError("u and b must have the same length")
    diff = u - b
    dist = float(np.linalg.norm(diff))
    arg = 1.0 - dist / SQRT2
    if arg <= cfg.epsilon:
        return -cfg.w_bias * math.log(cfg.epsilon), np.zeros_like(u)
    loss = -cfg.w_bias * math.log(arg)
    if dist == 0.0:
        return loss, np.zeros_like(u)
    return loss, cfg.w_bias * diff / (SQRT2 * arg * dist)


def largest_remainder_counts(m: int, b) -> np.ndarray:
    """Integer counts summing to ``m`` closest to ``m * b``.

    Leftover units go to the largest fractional parts, lower index first on
    ties.
    """
    if m < 1:
        raise RejectedInputError("batch must be nonempty")
    b = as_bias(b)
    quota = m * b
    near = np.round(quota)
    quota = np.where(np.abs(quota - near) < 1e-9 * m, near, quota)
    counts = np.floor(quota).astype(np.int64)
    left = m - int(counts.sum())
    if left:
        frac = quota - counts
        order = np.lexsort((np.arange(b.size), -frac))
        counts[order[:left]] += 1
    return counts


def enforce_bias(G, b) -> tuple[np.ndarray, np.ndarray]:
    """Batchwise bias enforcement on an (M, N) batch of soft gates.

    Expert by expert, the ``K_n`` still-unclaimed rows with the largest gate
    value in column ``n`` are claimed (ties go to the lower row index); every
    other entry of a claimed row, and column ``n`` of every unclaimed row, is
    zeroed. Returns the masked batch and the expert index of each row.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise RejectedInputError("expected a nonempty (M, N) gate batch")
    m, n = G.shape
    counts = largest_remainder_counts(m, as_bias(b, n))
    assignment = np.full(m, -1, dtype=np.int64)
    rows = np.arange(m)
    for k in range(n):
        free = rows[assignment < 0]
        order = free[np.lexsort((free, -G[free, k]))]
        assignment[order[:counts[k]]] = k
    masked = np.zeros_like(G)
    masked[rows, assignment] = G[rows, assignment]
    return masked, assignment


@dataclass(frozen=True)
class MixtureModel:
    experts: tuple[ExpertSpec, ...]
    gating_net: DenseNet
    bias: np.ndarray
    method: str = "bias_enforcement"
    expert_refs: tuple[str, ...] = ()  # file names, for checkpoints

    def __post_init__(self):
        experts = tuple(self.experts)
        if not experts:
            raise ConfigurationError("a mixture needs at least one expert")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.gating_net.output_dim != len(experts):
            raise ConfigurationError(
                f"gating net emits {self.gating_net.output_dim} logits for {len(experts)} experts")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "bias", as_bias(self.bias, len(experts)))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def costs(self) -> np.ndarray:
        return np.array([e.data_cost_bytes for e in self.experts], dtype=np.float64)


def new_mixture(experts, input_dim: int, b, method: str, hidden=(16,), seed: int = 0) -> MixtureModel:
    n = len(experts)
    gating = init_dense([input_dim, *hidden, n], seed=seed)
    return MixtureModel(tuple(experts), gating, np.asarray(b, dtype=np.float64), method)


def _gates(model: MixtureModel, x) -> np.ndarray:
    f = forward(model.gating_net, x)
    if not np.all(np.isfinite(f)):
        raise RejectedInputError("gating network produced non-finite logits")
    if model.n_experts == 1:
        return np.ones_like(f)
    return softmax(f)


def route(model: MixtureModel, x, routing: str, batch_size: int | None = None):
    """Soft gates and the chosen expert per input.

    ``batch_enforced`` partitions consecutive chunks of ``batch_size`` rows
    (all rows at once by default).
    """
    if routing not in ROUTINGS:
        raise ConfigurationError(f"unknown routing {routing!r}")
    G = _gates(model, x)
    if routing == "per_input_argmax":
        return G, np.argmax(G, axis=1)
    m = len(G)
    step = m if batch_size is None else batch_size
    assignment = np.empty(m, dtype=np.int64)
    for start in range(0, m, step):
        _, assignment[start:start + step] = enforce_bias(G[start:start + step], model.bias)
    return G, assignment


@dataclass
class MixtureOutput:
    y: np.ndarray  # (M, C) gate-scaled expert logits
    assignment: np.ndarray
    gates: np.ndarray  # soft gates, (M, N)
    realized_cost: float

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.y, axis=1)


def mixture_forward(model: MixtureModel, x, routing: str = "per_input_argmax",
                    batch_size: int | None = None) -> MixtureOutput:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise RejectedInputError("mixture_forward needs a nonempty batch of inputs")
    G, assignment = route(model, x, routing, batch_size)
    rows = np.arange(len(x))
    g = G[rows, assignment]
    y = None
    for n, expert in enumerate(model.experts):
        sel = rows[assignment == n]
        if sel.size == 0:
            continue
        z = expert_logits(expert, x[sel])  # only routed inputs reach expert n
        if y is None:
            y = np.zeros((len(x), z.shape[1]))
        y[sel] = g[sel, None] * z
    cost = float(model.costs[assignment].mean())
    return MixtureOutput(y, assignment, G, cost)


def mixture_objective(gating_net: DenseNet, x, expert_out, labels, assignment,
                      b=None, loss_cfg: BiasLossConfig | None = None):
    """Batch loss and gating-parameter gradients for a fixed routing.

    ``expert_out`` is (M, N, C): every expert's logits for every row. The
    task loss is the mean cross-entropy of ``G[i, a_i] * expert_out[i, a_i]``.
    When ``loss_cfg`` is given the bias penalty on the mean soft gate is
    added. Returns ``(task_loss, bias_loss, grads, u)``.
    """
    x = np.asarray(x, dtype=np.float64)
    Z = np.asarray(expert_out, dtype=np.float64)
    a = np.asarray(assignment)
    m = len(x)
    rows = np.arange(m)
    G = softmax(forward(gating_net, x))
    g = G[rows, a]
    z = Z[rows, a]
    losses, dy = softmax_cross_entropy(g[:, None] * z, np.asarray(labels))
    task = float(losses.mean())
    dg = (dy * z).sum(axis=1) / m
    # d g_i / d f_i = g_i * (e_{a_i} - G_i)
    df = -(g * dg)[:, None] * G
    df[rows, a] += g * dg
    u = utility(G)
    lb = 0.0
    if loss_cfg is not None:
        lb, du = bias_loss(u, as_bias(b, G.shape[1]), loss_cfg)
        v = du / m
        df += G * (v[None, :] - (G @ v)[:, None])
    return task, lb, backward(gating_net, x, df), u


@dataclass
class TrainingLog:
    n_experts: int
    rows: list = field(default_factory=list)

    def append(self, step, task_loss, bias_loss_value, u, realized_cost):
        self.rows.append([step, task_loss, bias_loss_value, *map(float, u), realized_cost])

    @property
    def header(self) -> list[str]:
        return (["step", "task_loss", "bias_loss"]
                + [f"u_{n + 1}" for n in range(self.n_experts)] + ["realized_cost"])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])

    def column(self, name: str) -> np.ndarray:
        k = self.header.index(name)
        return np.array([r[k] for r in self.rows], dtype=np.float64)


# Desk-scale schedule for the gating network; see README for the reasoning.
DEFAULT_MIXTURE_TRAIN = TrainConfig(batch_size=128, learning_rate=0.5, steps=1500)


def precompute_expert_logits(experts, x) -> np.ndarray:
    """(M, N, C) logits of every frozen expert; valid because experts never change."""
    return np.stack([expert_logits(e, x) for e in experts], axis=1)


def train_mixture(model: MixtureModel, dataset: Dataset, cfg: TrainConfig = DEFAULT_MIXTURE_TRAIN,
                  loss_cfg: BiasLossConfig | None = None, split: str = "train",
                  log_every: int = 1):
    """Update the gating network only; experts stay byte-identical.

    Returns the trained model and a :class:`TrainingLog`. Raises
    :class:`TrainingDivergedError` with the step index on a non-finite loss.
    """
    x, labels = dataset.split(split)
    if len(x) == 0:
        raise RejectedInputError(f"split {split!r} is empty")
    n = model.n_experts
    if model.method == "soft_regularization" and loss_cfg is None:
        loss_cfg = BiasLossConfig()
    bias_cfg = loss_cfg if model.method == "soft_regularization" else None
    log = TrainingLog(n)
    if n == 1:
        return model, log
    Z = precompute_expert_logits(model.experts, x)
    costs = model.costs
    rng = np.random.default_rng(cfg.seed)
    batches = iterate_minibatches(len(x), cfg.batch_size, rng)
    net = model.gating_net
    for step in range(cfg.steps):
        idx = next(batches)
        xb = x[idx]
        f = forward(net, xb)
        if not np.all(np.isfinite(f)):
            raise TrainingDivergedError(f"non-finite gating logits at step {step}", step=step)
        if model.method == "bias_enforcement":
            _, a = enforce_bias(soft_gate(f), model.bias)
        else:
            a = np.argmax(soft_gate(f), axis=1)
        task, lb, grads, u = mixture_objective(net, xb, Z[idx], labels[idx], a,
                                               model.bias, bias_cfg)
        if not (math.isfinite(task) and math.isfinite(lb)):
            raise TrainingDivergedError(f"non-finite loss at step {step}", step=step)
        try:
            net = sgd_step(net, grads, cfg.learning_rate)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"{exc} at step {step}", step=step) from exc
        if log_every and step % log_every == 0:
            log.append(step, task, lb, u, float(costs[a].mean()))
    return replace(model, gating_net=net), log


def utility_deviation(model: MixtureModel, x) -> float:
    """L1 distance between the mean soft gate over ``x`` and the bias."""
    return float(np.abs(utility(_gates(model, x)) - model.bias).sum())


def selection_deviation(model: MixtureModel, x, routing: str, batch_size=None) -> float:
    _, a = route(model, x, routing, batch_size)
    return float(np.abs(selection_frequency(a, model.n_experts) - model.bias).sum())


# ---- files -----------------------------------------------------------------

def mixture_to_json(model: MixtureModel) -> dict:
    refs = list(model.expert_refs) or [f"expert_{e.id}.json" for e in model.experts]
    return {"gating": to_checkpoint(model.gating_net), "experts": refs,
            "b": [float(v) for v in model.bias], "method": model.method}


def save_mixture(model: MixtureModel, path) -> None:
    Path(path).write_text(json.dumps(mixture_to_json(model)))


def load_mixture(path, experts=None) -> MixtureModel:
    """Load a mixture; expert references resolve relative to the file."""
    path = Path(path)
    obj = json.loads(path.read_text())
    if experts is None:
        experts = [load_expert(path.parent / ref) for ref in obj["experts"]]
    return MixtureModel(tuple(experts), from_checkpoint(obj["gating"]), np.array(obj["b"]),
                        obj["method"], tuple(obj["experts"]))
