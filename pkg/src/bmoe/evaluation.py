"""Cost-performance curves, the normalised area ``rho`` and the benchmark sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RejectedInputError
from .nn import TrainConfig
from .solver import solve_for_cost
from .synth import (DEFAULT_EXPERT_TRAIN, Dataset, ExpertSpec, PreprocessSpec,
                    default_expert_specs, expert_logits, generate, train_experts)
from .training import (DEFAULT_MIXTURE_TRAIN, BiasLossConfig, MixtureModel, as_bias,
                       mixture_forward, new_mixture, selection_deviation, train_mixture,
                       utility_deviation)

log = logging.getLogger(__name__)

METHOD_NAMES = {
    "enforcement": "bias_enforcement",
    "soft": "soft_regularization",
    "random": "random_selection",
    "single": "single_expert",
}
DEFAULT_METHODS = ("enforcement", "soft", "random", "single")
DEFAULT_W_BIAS_GRID = (0.1, 0.5, 1.0, 5.0)
RESULTS_COLUMNS = ("method", "d_t_bytes", "realized_cost_bytes", "performance", "seed")


@dataclass(frozen=True)
class CurvePoint:
    d_t: float
    realized_cost: float
    performance: float
    method: str = ""


@dataclass
class RateCurve:
    points: list[CurvePoint]
    d_min: float
    d_max: float

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.d_t)
        if not self.d_max > self.d_min:
            raise RejectedInputError("d_max must exceed d_min")

    @property
    def rho(self) -> float:
        return rho(self)


def rho(curve: RateCurve) -> float:
    """Trapezoid-rule area under performance over normalised cost in [0, 1]."""
    if len(curve.points) < 2:
        raise RejectedInputError("rho needs at least two points")
    span = curve.d_max - curve.d_min
    t = np.array([(p.d_t - curve.d_min) / span for p in curve.points])
    perf = np.array([p.performance for p in curve.points])
    order = np.argsort(t, kind="stable")
    t, perf = t[order], perf[order]
    if abs(t[0]) > 1e-9 or abs(t[-1] - 1.0) > 1e-9:
        raise RejectedInputError("curve must contain points at d_min and d_max")
    return float(np.sum(0.5 * np.diff(t) * (perf[1:] + perf[:-1])))


def rho_from_pairs(pairs, d_min: float, d_max: float) -> float:
    return rho(RateCurve([CurvePoint(d, d, p) for d, p in pairs], d_min, d_max))


# ---- benchmarks ------------------------------------------------------------

def expert_test_correct(experts, dataset: Dataset, split: str = "test") -> np.ndarray:
    """(N, M) boolean matrix: expert n classifies split example i correctly."""
    x, y = dataset.split(split)
    return np.stack([np.argmax(expert_logits(e, x), axis=1) == y for e in experts])


def single_expert_baseline(experts, dataset: Dataset, split: str = "test"):
    """``[(d_n, performance_n), ...]`` for every expert alone, sorted by cost."""
    correct = expert_test_correct(experts, dataset, split)
    pts = [(float(e.data_cost_bytes), float(c.mean())) for e, c in zip(experts, correct)]
    return sorted(pts)


def interpolate_benchmark(points, d_t: float) -> float:
    """Piecewise-linear performance between standalone expert points."""
    d = np.array([p[0] for p in points], dtype=np.float64)
    perf = np.array([p[1] for p in points], dtype=np.float64)
    if not d.min() - 1e-9 <= d_t <= d.max() + 1e-9:
        raise RejectedInputError(f"d_t={d_t} outside [{d.min()}, {d.max()}]")
    return float(np.interp(d_t, d, perf))


@dataclass
class RandomBaselineResult:
    mean: float
    sd: float
    realized_cost: float
    trials: list[float]

    @property
    def sem(self) -> float:
        """Standard error of ``mean``; shrinks as trials are added."""
        return self.sd / math.sqrt(len(self.trials))


def random_selection_baseline(experts, dataset: Dataset, b, seed: int = 0, trials: int = 20,
                              split: str = "test", correct=None) -> RandomBaselineResult:
    """Route each input to expert n with probability b_n, independently."""
    b = as_bias(b, len(experts))
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    if correct is None:
        correct = expert_test_correct(experts, dataset, split)
    costs = np.array([e.data_cost_bytes for e in experts], dtype=np.float64)
    m = correct.shape[1]
    rng = np.random.default_rng(seed)
    rows = np.arange(m)
    accs, spent = [], []
    for _ in range(trials):
        pick = rng.choice(len(experts), size=m, p=b)
        accs.append(float(correct[pick, rows].mean()))
        spent.append(float(costs[pick].mean()))
    if min(accs) == max(accs) and min(spent) == max(spent):
        # a constant sample (e.g. one-hot b): avoid float residue in mean and sd
        return RandomBaselineResult(accs[0], 0.0, spent[0], accs)
    sd = float(np.std(accs, ddof=1))
    return RandomBaselineResult(float(np.mean(accs)), sd, float(np.mean(spent)), accs)


# ---- sweep ------------------------------------------------------------------

def default_targets(d_min: float, d_max: float) -> list[float]:
    grid = [d_max, (d_min + d_max) / 2, d_max / 2, d_max / 3, d_min]
    return clip_targets(grid, d_min, d_max)


def clip_targets(targets, d_min: float, d_max: float) -> list[float]:
    """Drop infeasible targets (with a notice) and duplicates; ascending order."""
    kept = []
    for t in targets:
        t = float(t)
        if t < d_min - 1e-9 or t > d_max + 1e-9:
            log.warning("target %.6g outside feasible interval [%.6g, %.6g], skipped",
                        t, d_min, d_max)
            continue
        if all(abs(t - k) > 1e-9 * max(1.0, abs(k)) for k in kept):
            kept.append(t)
    return sorted(kept)


@dataclass
class SweepConfig:
    task: str = "feature"
    experts: list[PreprocessSpec] | None = None
    expert_hidden: tuple[int, ...] = (32,)
    expert_train: TrainConfig | None = None
    gating_hidden: tuple[int, ...] = (16,)
    mixture_train: TrainConfig = DEFAULT_MIXTURE_TRAIN
    methods: tuple[str, ...] = DEFAULT_METHODS
    targets: list[float] | str = "auto"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    w_bias_grid: tuple[float, ...] = DEFAULT_W_BIAS_GRID
    # soft-regularised candidates must keep val cost <= d_t + this fraction of the range
    budget_slack: float = 0.01
    random_trials: int = 20
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.methods) - set(METHOD_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown methods {sorted(unknown)}")
        if not self.seeds:
            raise ConfigurationError("need at least one seed")
        if self.experts is not None:
            costs = [s.data_cost_bytes for s in self.experts]
            if not costs:
                raise ConfigurationError("need at least one expert")
            if len(set(costs)) != len(costs):
                raise ConfigurationError("expert data costs must be distinct")


@dataclass
class Cell:
    method: str
    d_t: float
    seed: int
    realized_cost: float
    performance: float
    b: list[float]
    extra: dict = field(default_factory=dict)


def _seed_train_cfg(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(cfg.batch_size, cfg.learning_rate, cfg.steps, seed)


def evaluate_mixture(model: MixtureModel, dataset: Dataset, split: str, routing: str,
                     batch_size: int | None = None):
    x, y = dataset.split(split)
    out = mixture_forward(model, x, routing, batch_size)
    return float(np.mean(out.predictions == y)), out.realized_cost


def select_w_bias(candidates, d_t: float, budget: float):
    """Pick the soft-regularised candidate with the best val performance whose
    val cost stays within ``d_t + budget``; without one, the cheapest.

    ``candidates`` are ``(w_bias, model, val_perf, val_cost)`` tuples.
    """
    ok = [c for c in candidates if c[3] <= d_t + budget]
    if ok:
        return max(ok, key=lambda c: c[2])
    return min(candidates, key=lambda c: c[3])


def run_cell(method: str, d_t: float, seed: int, b, experts, dataset: Dataset,
             cfg: SweepConfig, standalone, correct) -> Cell:
    b = np.asarray(b, dtype=np.float64)
    x_test, _ = dataset.split("test")
    costs = np.array([e.data_cost_bytes for e in experts], dtype=np.float64)
    span = float(costs.max() - costs.min())
    train_cfg = _seed_train_cfg(cfg.mixture_train, seed)
    if method == "single":
        return Cell(method, d_t, seed, d_t, interpolate_benchmark(standalone, d_t), b.tolist())
    if method == "random":
        r = random_selection_baseline(experts, dataset, b, seed, cfg.random_trials,
                                      correct=correct)
        return Cell(method, d_t, seed, r.realized_cost, r.mean, b.tolist(), {"sd": r.sd})
    input_dim = dataset.x.shape[1]
    if method == "enforcement":
        model = new_mixture(experts, input_dim, b, "bias_enforcement", cfg.gating_hidden, seed)
        model, _ = train_mixture(model, dataset, train_cfg)
        perf, cost = evaluate_mixture(model, dataset, "test", "batch_enforced",
                                      train_cfg.batch_size)
        alt_perf, alt_cost = evaluate_mixture(model, dataset, "test", "per_input_argmax")
        extra = {"per_input_argmax_performance": alt_perf,
                 "per_input_argmax_cost": alt_cost,
                 "utility_l1": utility_deviation(model, x_test),
                 "selection_l1": selection_deviation(model, x_test, "batch_enforced",
                                                     train_cfg.batch_size)}
        return Cell(method, d_t, seed, cost, perf, b.tolist(), extra)
    if method == "soft":
        candidates = []
        for w in cfg.w_bias_grid:
            model = new_mixture(experts, input_dim, b, "soft_regularization",
                                cfg.gating_hidden, seed)
            model, _ = train_mixture(model, dataset, train_cfg, BiasLossConfig(w))
            vp, vc = evaluate_mixture(model, dataset, "val", "per_input_argmax")
            candidates.append((w, model, vp, vc))
        w, model, vp, vc = select_w_bias(candidates, d_t, cfg.budget_slack * span)
        perf, cost = evaluate_mixture(model, dataset, "test", "per_input_argmax")
        extra = {"w_bias": w, "val_performance": vp, "val_cost": vc,
                 "utility_l1": utility_deviation(model, x_test),
                 "selection_l1": selection_deviation(model, x_test, "per_input_argmax")}
        return Cell(method, d_t, seed, cost, perf, b.tolist(), extra)
    raise ConfigurationError(f"unknown method {method!r}")


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class SeedContext:
    seed: int
    dataset: Dataset
    experts: list[ExpertSpec]
    targets: list[float]
    biases: dict  # d_t -> b
    standalone: list
    correct: np.ndarray


def prepare_seed(cfg: SweepConfig, seed: int) -> SeedContext:
    dataset = generate(cfg.task, seed, **cfg.dataset)
    specs = cfg.experts or default_expert_specs(cfg.task, dataset)
    base = cfg.expert_train or DEFAULT_EXPERT_TRAIN.get(cfg.task, TrainConfig())
    experts = train_experts(dataset, specs, cfg.expert_hidden, _seed_train_cfg(base, seed))
    d = np.array([e.data_cost_bytes for e in experts], dtype=np.float64)
    p = np.array([e.val_performance for e in experts])
    if cfg.targets == "auto":
        targets = default_targets(d.min(), d.max())
    else:
        targets = clip_targets(cfg.targets, d.min(), d.max())
    biases = {}
    for t in list(targets):
        sol = solve_for_cost(d, p, t)
        if sol.status != "optimal":
            log.warning("target %.6g infeasible, skipped", t)
            targets.remove(t)
            continue
        biases[t] = sol.b
    correct = expert_test_correct(experts, dataset)
    standalone = single_expert_baseline(experts, dataset)
    return SeedContext(seed, dataset, experts, targets, biases, standalone, correct)


@dataclass
class EvalReport:
    task: str
    seeds: list[int]
    methods: list[str]
    cells: list[Cell]
    experts: dict  # seed -> list of {id, cost_bytes, val_perf, test_perf}
    d_min: float
    d_max: float

    def curve(self, method: str, seed: int) -> RateCurve:
        pts = [CurvePoint(c.d_t, c.realized_cost, c.performance, method)
               for c in self.cells if c.method == method and c.seed == seed]
        return RateCurve(pts, self.d_min, self.d_max)

    def rho_by_seed(self, method: str) -> dict[int, float]:
        return {s: self.curve(method, s).rho for s in self.seeds}

    def mean_rho(self, method: str) -> float:
        return float(np.mean(list(self.rho_by_seed(method).values())))

    def performance(self, method: str, d_t: float) -> list[float]:
        return [c.performance for c in self.cells
                if c.method == method and abs(c.d_t - d_t) <= 1e-9 * max(1.0, d_t)]

    @property
    def targets(self) -> list[float]:
        return sorted({c.d_t for c in self.cells})

    def to_json(self) -> dict:
        methods = {}
        for m in self.methods:
            curve = []
            for t in self.targets:
                sel = [c for c in self.cells if c.method == m and c.d_t == t]
                if not sel:
                    continue
                perf = [c.performance for c in sel]
                curve.append({"d_t": t,
                              "realized_cost_mean": float(np.mean([c.realized_cost for c in sel])),
                              "performance_mean": float(np.mean(perf)),
                              "performance_sd": float(np.std(perf, ddof=1)) if len(perf) > 1 else 0.0})
            rhos = self.rho_by_seed(m)
            vals = list(rhos.values())
            methods[m] = {"name": METHOD_NAMES[m], "curve": curve,
                          "rho_by_seed": {str(k): v for k, v in rhos.items()},
                          "rho_mean": float(np.mean(vals)),
                          "rho_sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
        deviations = [{"method": c.method, "seed": c.seed, "d_t": c.d_t,
                       "utility_l1": c.extra["utility_l1"],
                       "selection_l1": c.extra["selection_l1"]}
                      for c in self.cells if "utility_l1" in c.extra]
        return {"task": self.task, "seeds": self.seeds, "d_min": self.d_min,
                "d_max": self.d_max, "targets": self.targets, "methods": methods,
                "experts": {str(k): v for k, v in self.experts.items()},
                "utility_deviation": deviations,
                "cells": [asdict(c) for c in self.cells]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RESULTS_COLUMNS)
            for c in self.cells:
                w.writerow([c.method, repr(c.d_t), repr(c.realized_cost),
                            repr(c.performance), c.seed])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def sweep(cfg: SweepConfig, jobs: int = 1) -> EvalReport:
    """Train and evaluate every (method, target, seed) cell.

    Per seed: generate data, train experts, turn each target into ``b`` with
    :func:`solve_for_cost`. Cells are independent and run on ``jobs``
    processes; results come back in a fixed order regardless of ``jobs``.
    """
    contexts = [prepare_seed(cfg, s) for s in cfg.seeds]
    jobs_list = []
    for ctx in contexts:
        for t in ctx.targets:
            for m in cfg.methods:
                jobs_list.append((m, t, ctx.seed, ctx.biases[t], ctx.experts, ctx.dataset,
                                  cfg, ctx.standalone, ctx.correct))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell_args, jobs_list))
    else:
        cells = [_run_cell_args(a) for a in jobs_list]
    d_all = [e.data_cost_bytes for e in contexts[0].experts]
    experts = {ctx.seed: [{"id": e.id, "cost_bytes": e.data_cost_bytes,
                           "val_perf": e.val_performance,
                           "test_perf": float(ctx.correct[k].mean())}
                          for k, e in enumerate(ctx.experts)] for ctx in contexts}
    return EvalReport(cfg.task, list(cfg.seeds), list(cfg.methods), cells, experts,
                      float(min(d_all)), float(max(d_all)))


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("d_t_bytes", "realized_cost_bytes", "performance"):
            r[k] = float(r[k])
        r["seed"] = int(r["seed"])
    return rows
