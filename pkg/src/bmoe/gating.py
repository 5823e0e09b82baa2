"""Gate values over N experts.

``soft_gate`` is the ordinary normalised exponential of the gating logits.
``sparse_gate`` keeps only the top entry of the soft gate (lowest index on
ties), and ``utility`` averages soft gates over a batch.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RejectedInputError
from .nn import DenseNet, forward, softmax


def _logits(logits) -> np.ndarray:
    f = np.asarray(logits, dtype=np.float64)
    if f.ndim not in (1, 2):
        raise RejectedInputError("logits must be a vector or a batch of vectors")
    if f.shape[-1] < 2:
        raise ConfigurationError(f"need at least 2 experts, got {f.shape[-1]}")
    if not np.all(np.isfinite(f)):
        raise RejectedInputError("gating logits must be finite")
    return f


def soft_gate(logits) -> np.ndarray:
    """Softmax over all N entries. Works row-wise on an (M, N) batch."""
    return softmax(_logits(logits))


def top_expert(logits) -> np.ndarray:
    """Index of the largest soft gate, lowest index on ties.

    Ranking the gate values (not the raw logits) keeps the choice consistent
    with :func:`sparse_gate` when logits differ by less than the softmax
    resolves.
    """
    # np.argmax returns the first maximum, which is the lowest-index tie-break
    return np.argmax(softmax(_logits(logits)), axis=-1)


def sparse_gate(logits) -> np.ndarray:
    """Soft gate masked to the argmax entry."""
    f = _logits(logits)
    g = softmax(f)
    keep = np.argmax(g, axis=-1)
    out = np.zeros_like(g)
    if f.ndim == 1:
        out[keep] = g[keep]
    else:
        rows = np.arange(len(f))
        out[rows, keep] = g[rows, keep]
    return out


def utility(batch_soft_gates) -> np.ndarray:
    """Per-expert mean gate value over the rows of an (M, N) batch."""
    G = np.asarray(batch_soft_gates, dtype=np.float64)
    if G.ndim != 2:
        raise RejectedInputError("expected an (M, N) gate batch")
    if G.shape[0] == 0:
        raise RejectedInputError("empty gate batch")
    return G.mean(axis=0)


def selection_frequency(assignment, n_experts: int) -> np.ndarray:
    """Fraction of rows routed to each expert."""
    a = np.asarray(assignment)
    if a.size == 0:
        raise RejectedInputError("empty assignment")
    return np.bincount(a, minlength=n_experts)[:n_experts] / a.size


def gate_logits(gating_net: DenseNet, x, n_experts: int | None = None) -> np.ndarray:
    if n_experts is not None and gating_net.output_dim != n_experts:
        raise RejectedInputError(
            f"gating network emits {gating_net.output_dim} logits for {n_experts} experts")
    out = forward(gating_net, x)
    if not np.all(np.isfinite(out)):
        raise RejectedInputError("gating network produced non-finite logits")
    return out


def write_gate_csv(path, gates, ids=None) -> None:
    """Debug dump: one row per input, ``id, g_1..g_N``."""
    G = np.atleast_2d(np.asarray(gates, dtype=np.float64))
    ids = range(len(G)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"g_{n + 1}" for n in range(G.shape[1])])
        for i, row in zip(ids, G):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_gate_csv(path) -> tuple[list[str], np.ndarray]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    return [r[0] for r in body], np.array([[float(v) for v in r[1:]] for r in body])
