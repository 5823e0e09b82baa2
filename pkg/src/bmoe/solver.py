"""Choosing a bias vector for a data-cost or performance target.

With per-expert costs ``d`` and validation performances ``p`` the bias ``b``
is a point of the probability simplex. ``solve_for_cost`` maximises the
expected performance ``b.p`` subject to ``b.d == d_t``; ``solve_for_perf``
minimises ``b.d`` subject to ``b.p == p_t``. Both go through a dense
two-phase tableau simplex with Bland's rule. ``brute_force_solve`` is an
exhaustive grid search kept around as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, RejectedInputError, SolverNumericalError

PIVOT_TOL = 1e-10
EQUALITY_TOL = 1e-8  # half-width of the band that replaces b.d == d_t
FEAS_TOL = 1e-9  # phase-one residual below which the LP counts as feasible
OPT_TOL = 1e-9  # reduced costs within this (relative) band count as zero


@dataclass
class SimplexResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    objective: float | None
    # Farkas multipliers (y_ub >= 0, y_ub.A_ub + y_eq.A_eq >= 0, y.b < 0)
    certificate: tuple[np.ndarray, np.ndarray] | None = None
    trace: list = field(default_factory=list)


def _as_2d(A, n):
    if A is None:
        return np.zeros((0, n))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.shape[1] != n:
        raise RejectedInputError(f"constraint matrix has {A.shape[1]} columns, expected {n}")
    return A


def _run_phase(T, basis, obj, trace, max_iter, protect=None):
    """Pivot until no reduced cost in ``obj`` is positive (maximisation).

    ``T`` is the (m, ncols+1) tableau with the rhs in the last column, ``obj``
    the reduced-cost row (last entry holds minus the objective value).
    ``protect`` lists columns that may not enter. Returns "optimal" or
    "unbounded"; works in place.
    """
    m, width = T.shape
    ncols = width - 1
    allowed = np.ones(ncols, dtype=bool)
    if protect is not None:
        allowed[protect] = False
    for _ in range(max_iter):
        candidates = np.flatnonzero((obj[:ncols] > PIVOT_TOL) & allowed)
        if candidates.size == 0:
            return "optimal"
        j = candidates[0]  # Bland: lowest index enters
        col = T[:, j]
        rows = np.flatnonzero(col > PIVOT_TOL)
        if rows.size == 0:
            return "unbounded"
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + PIVOT_TOL * max(1.0, abs(best))]
        i = ties[np.argmin([basis[r] for r in ties])]  # Bland: lowest basic index leaves
        trace.append((int(j), int(basis[i]), float(T[i, j])))
        _pivot(T, obj, i, j)
        basis[i] = j
    raise SolverNumericalError(f"no convergence after {max_iter} pivots", trace)


def _pivot(T, obj, i, j):
    T[i] /= T[i, j]
    for r in range(T.shape[0]):
        if r != i and T[r, j] != 0.0:
            T[r] -= T[r, j] * T[i]
    obj -= obj[j] * T[i]


def simplex_solve(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None,
                  max_iter: int = 10_000, tie_breaks=()) -> SimplexResult:
    """Maximise ``c.x`` over ``x >= 0`` with ``A_ub x <= b_ub`` and ``A_eq x == b_eq``.

    Two-phase tableau method. Phase one minimises the sum of artificial
    variables; a positive minimum yields a Farkas certificate. Each vector in
    ``tie_breaks`` is then maximised in turn over the optimal face of the
    objectives before it (lexicographic simplex: only columns with zero
    reduced cost in every earlier objective may enter). Raises
    :class:`SolverNumericalError` (with the pivot trace) when the final basic
    solution violates the constraints by more than round-off allows.
    """
    c = np.asarray(c, dtype=np.float64).ravel()
    n = c.size
    A_ub, A_eq = _as_2d(A_ub, n), _as_2d(A_eq, n)
    b_ub = np.asarray(b_ub if b_ub is not None else [], dtype=np.float64).ravel()
    b_eq = np.asarray(b_eq if b_eq is not None else [], dtype=np.float64).ravel()
    if b_ub.size != A_ub.shape[0] or b_eq.size != A_eq.shape[0]:
        raise RejectedInputError("right-hand side length does not match constraint rows")
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    if m == 0:
        if np.any(c > 0):
            return SimplexResult("unbounded", None, None)
        return SimplexResult("optimal", np.zeros(n), 0.0)

    # columns: x (n) | slacks (m_ub) | artificials (m) | rhs
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    rhs = np.concatenate([b_ub, b_eq])
    sign = np.where(rhs < 0, -1.0, 1.0)
    A *= sign[:, None]
    rhs = rhs * sign
    n_real = n + m_ub
    T = np.hstack([A, np.eye(m), rhs[:, None]])
    basis = list(range(n_real, n_real + m))
    trace: list = []

    # phase one: maximise -(sum of artificials)
    obj = np.zeros(n_real + m + 1)
    obj[:n_real] = A.sum(axis=0)
    obj[-1] = rhs.sum()
    _run_phase(T, basis, obj, trace, max_iter)
    scale = max(1.0, float(np.abs(rhs).max()))
    if obj[-1] > FEAS_TOL * scale:
        y = -1.0 - obj[n_real:n_real + m]
        y = y * sign
        return SimplexResult("infeasible", None, None, (y[:m_ub], y[m_ub:]), trace)

    # drive artificials at zero level out of the basis, dropping redundant rows
    keep = []
    for i in range(m):
        if basis[i] >= n_real:
            row = np.abs(T[i, :n_real])
            j = int(np.argmax(row))  # largest entry keeps the pivot well conditioned
            if row[j] <= PIVOT_TOL:
                continue
            trace.append((j, int(basis[i]), float(T[i, j])))
            _pivot(T, obj, i, j)
            basis[i] = j
        keep.append(i)
    T = np.hstack([T[keep, :n_real], T[keep, -1:]])
    basis = [basis[i] for i in keep]

    # phase two
    cost = np.concatenate([c, np.zeros(m_ub)])
    obj = np.concatenate([cost, [0.0]])
    for i, j in enumerate(basis):
        obj -= cost[j] * T[i]
    status = _run_phase(T, basis, obj, trace, max_iter)
    if status == "unbounded":
        return SimplexResult("unbounded", None, None, trace=trace)
    frozen = np.zeros(n_real, dtype=bool)
    for extra in tie_breaks:
        # a negative reduced cost means entering would lower an earlier objective
        frozen |= obj[:n_real] < -OPT_TOL * max(1.0, float(np.abs(cost).max(initial=0.0)))
        cost = np.concatenate([np.asarray(extra, dtype=np.float64).ravel(), np.zeros(m_ub)])
        obj = np.concatenate([cost, [0.0]])
        for i, j in enumerate(basis):
            obj -= cost[j] * T[i]
        if _run_phase(T, basis, obj, trace, max_iter, np.flatnonzero(frozen)) == "unbounded":
            return SimplexResult("unbounded", None, None, trace=trace)

    z = np.zeros(n_real)
    for i, j in enumerate(basis):
        z[j] = T[i, -1]
    x = z[:n]
    viol = 0.0
    if m_ub:
        viol = max(viol, float(np.max(A_ub @ x - b_ub)))
    if m_eq:
        viol = max(viol, float(np.max(np.abs(A_eq @ x - b_eq))))
    viol = max(viol, float(-x.min()))
    if viol > 1e3 * PIVOT_TOL * scale:
        raise SolverNumericalError(
            f"basic solution violates constraints by {viol:.3g}", trace)
    return SimplexResult("optimal", np.clip(x, 0.0, None), float(c @ x), trace=trace)


# ---- bias selection ----------------------------------------------------------

@dataclass
class LPSolution:
    b: np.ndarray | None
    objective_value: float | None
    status: str  # "optimal" | "infeasible"
    feasible_interval: tuple[float, float] | None = None

    def to_json(self) -> dict:
        out = {"b": None if self.b is None else [float(v) for v in self.b],
               "objective": self.objective_value, "status": self.status}
        if self.status != "optimal" and self.feasible_interval is not None:
            out["feasible_interval"] = list(self.feasible_interval)
        return out


def _vectors(d, p):
    d = np.asarray(d, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if d.size != p.size:
        raise RejectedInputError(f"d has {d.size} entries but p has {p.size}")
    if d.size < 1:
        raise RejectedInputError("need at least one expert")
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(p))):
        raise RejectedInputError("d and p must be finite")
    if np.any(d <= 0):
        raise RejectedInputError("data costs must be positive")
    return d, p


def average_cost(b, d) -> float:
    b = np.asarray(b, dtype=np.float64).ravel()
    d = np.asarray(d, dtype=np.float64).ravel()
    if b.size != d.size:
        raise RejectedInputError(f"b has {b.size} entries but d has {d.size}")
    return float(b @ d)


def _solve_banded(objective, sense, constraint, target, d):
    """Optimise ``objective`` over the simplex with ``constraint.b`` pinned to
    ``target`` (within EQUALITY_TOL). Alternative optima are resolved toward
    lower ``d.b`` and then the lexicographically smallest ``b``.
    """
    n = objective.size
    tol = EQUALITY_TOL
    A_ub = np.vstack([constraint, -constraint])
    b_ub = np.array([target + tol, -(target - tol)])
    c = objective if sense == "max" else -objective
    tie_breaks = [-d] + [-np.eye(n)[k] for k in range(n)]
    res = simplex_solve(c, A_ub, b_ub, np.ones((1, n)), [1.0], tie_breaks=tie_breaks)
    if res.status != "optimal":
        return None
    return res.x


def _polish(b, constraint, target):
    """Recompute ``b`` exactly on its support (at most two experts).

    The tolerance band lets the simplex leave crumbs of size ~EQUALITY_TOL;
    solving the two equalities on the detected support removes them. Falls
    back to the raw vertex if the exact system has no valid solution.
    """
    support = np.flatnonzero(b > 1e-6)
    exact = np.zeros_like(b)
    if support.size == 1:
        k = support[0]
        if abs(constraint[k] - target) <= EQUALITY_TOL:
            exact[k] = 1.0
            return exact
    elif support.size == 2:
        i, j = support
        if constraint[i] != constraint[j]:
            t = (target - constraint[j]) / (constraint[i] - constraint[j])
            if 0.0 <= t <= 1.0:
                exact[i], exact[j] = t, 1.0 - t
                return exact
    b = np.where(b < 1e-12, 0.0, b)
    return b / b.sum()


def _finish(b, objective_vec, constraint, target, interval):
    if b is None:
        return LPSolution(None, None, "infeasible", interval)
    b = _polish(b, constraint, target)
    return LPSolution(b, float(b @ objective_vec), "optimal", interval)


def solve_for_cost(d, p, d_t: float) -> LPSolution:
    """Bias maximising expected performance at average data cost ``d_t``."""
    d, p = _vectors(d, p)
    interval = (float(d.min()), float(d.max()))
    return _finish(_solve_banded(p, "max", d, float(d_t), d), p, d, float(d_t), interval)


def solve_for_perf(d, p, p_t: float) -> LPSolution:
    """Bias minimising average data cost at expected performance ``p_t``."""
    d, p = _vectors(d, p)
    interval = (float(p.min()), float(p.max()))
    return _finish(_solve_banded(d, "min", p, float(p_t), d), d, p, float(p_t), interval)


# ---- exhaustive oracle -------------------------------------------------------

MAX_BRUTE_FORCE_EXPERTS = 5


@lru_cache(maxsize=16)
def _grid_points(k: int, steps: int) -> np.ndarray:
    """All nonnegative integer k-vectors with sum <= steps."""
    pts = np.zeros((1, 0), dtype=np.int64)
    for _ in range(k):
        room = steps - pts.sum(axis=1)
        counts = room + 1
        base = np.repeat(pts, counts, axis=0)
        starts = np.repeat(np.cumsum(counts) - counts, counts)
        vals = np.arange(counts.sum()) - starts
        pts = np.hstack([base, vals[:, None]])
    pts.setflags(write=False)
    return pts


def brute_force_solve(d, p, target: float, mode: str = "cost",
                      grid_step: float = 0.005) -> LPSolution:
    """Grid search over the simplex, used to cross-check the simplex path.

    Every coordinate except the two extremes of the constraint vector is
    stepped over a grid of spacing ``grid_step``; the two extremes then absorb
    the leftover mass and constraint value exactly. Any optimum supported on
    two experts is approximated with objective error at most
    ``2 * grid_step * spread(objective)``.
    """
    d, p = _vectors(d, p)
    n = d.size
    if n > MAX_BRUTE_FORCE_EXPERTS:
        raise ConfigurationError(
            f"brute force is limited to {MAX_BRUTE_FORCE_EXPERTS} experts, got {n}")
    if not 0 < grid_step <= 0.01:
        raise ConfigurationError("grid_step must be in (0, 0.01]")
    if mode == "cost":
        a, obj, sense = d, p, 1.0
    elif mode == "perf":
        a, obj, sense = p, d, -1.0
    else:
        raise ConfigurationError(f"mode must be 'cost' or 'perf', got {mode!r}")
    interval = (float(a.min()), float(a.max()))
    steps = int(round(1.0 / grid_step))
    lo, hi = int(np.argmin(a)), int(np.argmax(a))
    eps = 1e-12 * max(1.0, float(np.abs(a).max()))

    if a[hi] - a[lo] <= eps:
        # constraint value is the same for every b
        if abs(target - a[0]) > EQUALITY_TOL:
            return LPSolution(None, None, "infeasible", interval)
        free = [k for k in range(n) if k != lo]
        grid = _grid_points(len(free), steps) / steps
        B = np.zeros((len(grid), n))
        B[:, free] = grid
        B[:, lo] = 1.0 - grid.sum(axis=1)
    else:
        free = [k for k in range(n) if k not in (lo, hi)]
        grid = _grid_points(len(free), steps) / steps
        rest = 1.0 - grid.sum(axis=1)
        need = target - grid @ a[free]
        b_hi = (need - a[lo] * rest) / (a[hi] - a[lo])
        b_lo = rest - b_hi
        ok = (b_hi >= -eps) & (b_lo >= -eps)
        if not ok.any():
            return LPSolution(None, None, "infeasible", interval)
        B = np.zeros((int(ok.sum()), n))
        B[:, free] = grid[ok]
        B[:, lo] = np.clip(b_lo[ok], 0.0, None)
        B[:, hi] = np.clip(b_hi[ok], 0.0, None)
    values = B @ obj
    best = int(np.argmax(sense * values))
    return LPSolution(B[best], float(values[best]), "optimal", interval)

