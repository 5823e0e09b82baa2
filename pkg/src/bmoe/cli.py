"""Command-line pipeline: ``bmoe gen-data | train-experts | solve-bias | train-mixture | sweep``.

Every command accepts ``--config FILE`` (a JSON object whose keys are the
long flag names with dashes or underscores); flags given on the command
line override it. Each output directory receives ``manifest.json`` with the
effective config, its hash, the seed and the sha256 of every artifact.

Exit codes: 0 ok, 2 usage or validation error, 3 infeasible target,
4 numerical failure (solver or training divergence).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import (BMoEError, ConfigurationError, RejectedInputError, SolverNumericalError,
                     TrainingDivergedError)
from .evaluation import DEFAULT_METHODS, DEFAULT_W_BIAS_GRID, METHOD_NAMES, SweepConfig, sweep
from .nn import TrainConfig
from .solver import solve_for_cost, solve_for_perf
from .synth import (DEFAULT_EXPERT_TRAIN, PreprocessSpec, default_expert_specs, generate,
                    load_expert, read_dataset, save_expert, train_experts, write_dataset)
from .training import (DEFAULT_MIXTURE_TRAIN, BiasLossConfig, new_mixture, save_mixture,
                       train_mixture)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4
MANIFEST = "manifest.json"
P_REPORT = "p_report.json"
MIXTURE_METHODS = {"enforcement": "bias_enforcement", "soft": "soft_regularization"}

log = logging.getLogger("bmoe")


class UsageError(BMoEError):
    pass


# ---- helpers ----------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out_dir, command: str, config: dict, seed, artifacts) -> Path:
    """Record config, its hash, the seed and artifact hashes next to the outputs."""
    out = Path(out_dir)
    entry = {"command": command, "config": config,
             "config_sha256": hashlib.sha256(_canonical(config).encode()).hexdigest(),
             "seed": seed,
             "artifacts": {Path(a).name: _sha256(a) for a in sorted(map(str, artifacts))}}
    path = out / MANIFEST
    path.write_text(json.dumps(entry, indent=1, sort_keys=True) + "\n")
    return path


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in obj.items()}


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """Flags beat the config file, which beats ``defaults``."""
    cfg = _load_config(getattr(args, "config", None))
    out = dict(defaults)
    out.update(cfg)
    for k, v in vars(args).items():
        if k in ("config", "command", "func") or v is None:
            continue
        out[k] = v
    return out


def _resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("BMOE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"BMOE_SEED must be an integer, got {env!r}") from exc


def _json_list(value, name: str):
    if isinstance(value, (list, tuple)):
        return list(value)
    try:
        out = json.loads(value)
    except (TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"--{name} must be a JSON array") from exc
    if not isinstance(out, list):
        raise UsageError(f"--{name} must be a JSON array")
    return out


def _train_cfg(base: TrainConfig, over: dict | None, seed: int) -> TrainConfig:
    over = dict(over or {})
    return TrainConfig(int(over.get("batch_size", base.batch_size)),
                       float(over.get("learning_rate", base.learning_rate)),
                       int(over.get("steps", base.steps)), seed)


def _expert_specs(value, task: str, dataset=None) -> list[PreprocessSpec]:
    """``None`` for the task defaults, else a JSON file or inline JSON list of specs."""
    if value is None:
        return default_expert_specs(task, dataset)
    if isinstance(value, str):
        p = Path(value)
        raw = json.loads(p.read_text()) if p.is_file() else _json_list(value, "experts")
    else:
        raw = value
    if not isinstance(raw, list) or not raw:
        raise ConfigurationError("experts must be a nonempty list of preprocessing specs")
    return [PreprocessSpec.from_json(s) for s in raw]


def _expert_files(expert_dir) -> list[Path]:
    report = Path(expert_dir) / P_REPORT
    if not report.is_file():
        raise UsageError(f"{expert_dir} has no {P_REPORT}; run train-experts first")
    return [Path(expert_dir) / r["file"] for r in json.loads(report.read_text())]


# ---- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    c = _merge(args, {"task": "feature"})
    seed = _resolve_seed(c.get("seed"))
    kwargs = dict(c.get("dataset") or {})
    if c.get("n_per_class") is not None:
        kwargs["n_per_class"] = int(c["n_per_class"])
    ds = generate(c["task"], seed, **kwargs)
    out = Path(c["output"])
    files = write_dataset(ds, out)
    config = {"task": c["task"], "dataset": kwargs}
    write_manifest(out, "gen-data", config, seed, files)
    print(json.dumps({"n": len(ds.y), "files": [str(f) for f in files]}))
    return EXIT_OK


def cmd_train_experts(args) -> int:
    c = _merge(args, {"hidden": [32]})
    seed = _resolve_seed(c.get("seed"))
    ds = read_dataset(c["data"])
    specs = _expert_specs(c.get("experts"), ds.task, ds)
    base = DEFAULT_EXPERT_TRAIN.get(ds.task, TrainConfig())
    tcfg = _train_cfg(base, c.get("train"), seed)
    experts = train_experts(ds, specs, tuple(c["hidden"]), tcfg)
    out = Path(c["output"])
    out.mkdir(parents=True, exist_ok=True)
    files, report = [], []
    for e in experts:
        f = out / f"expert_{e.id}.json"
        save_expert(e, f)
        files.append(f)
        report.append({"id": e.id, "file": f.name, "cost_bytes": e.data_cost_bytes,
                       "val_perf": e.val_performance})
    (out / P_REPORT).write_text(json.dumps(report, indent=1) + "\n")
    files.append(out / P_REPORT)
    config = {"data_sha256": _sha256(Path(c["data"]) / "data.jsonl"),
              "experts": [s.to_json() for s in specs], "hidden": list(c["hidden"]),
              "train": {"batch_size": tcfg.batch_size, "learning_rate": tcfg.learning_rate,
                        "steps": tcfg.steps}}
    write_manifest(out, "train-experts", config, seed, files)
    print(json.dumps([r["val_perf"] for r in report]))
    return EXIT_OK


def cmd_solve_bias(args) -> int:
    c = _merge(args, {})
    # a target given on the command line replaces either target from the config file
    if args.cost is not None:
        c.pop("perf", None)
    elif args.perf is not None:
        c.pop("cost", None)
    if c.get("cost") is not None and c.get("perf") is not None:
        raise UsageError("--cost and --perf are mutually exclusive")
    if c.get("cost") is None and c.get("perf") is None:
        raise UsageError("one of --cost or --perf is required")
    if c.get("experts") is not None:
        report = json.loads((Path(c["experts"]) / P_REPORT).read_text())
        d = [r["cost_bytes"] for r in report]
        p = [r["val_perf"] for r in report]
    else:
        if c.get("d") is None or c.get("p") is None:
            raise UsageError("give --experts DIR or both --d and --p")
        d, p = _json_list(c["d"], "d"), _json_list(c["p"], "p")
    if c.get("cost") is not None:
        sol = solve_for_cost(d, p, float(c["cost"]))
    else:
        sol = solve_for_perf(d, p, float(c["perf"]))
    text = json.dumps(sol.to_json())
    print(text)
    if c.get("output"):
        out = Path(c["output"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "bias.json").write_text(text + "\n")
        config = {"d": list(map(float, d)), "p": list(map(float, p)),
                  "cost": c.get("cost"), "perf": c.get("perf")}
        write_manifest(out, "solve-bias", config, None, [out / "bias.json"])
    if sol.status != "optimal":
        lo, hi = sol.feasible_interval
        print(f"infeasible target; feasible interval [{lo!r}, {hi!r}]", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _read_bias(value):
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    p = Path(value)
    if p.is_file():
        obj = json.loads(p.read_text())
        if isinstance(obj, dict):
            if obj.get("b") is None:
                raise UsageError(f"{value} holds no bias vector (status {obj.get('status')})")
            return obj["b"]
        return obj
    return _json_list(value, "bias")


def cmd_train_mixture(args) -> int:
    c = _merge(args, {"method": "enforcement", "w_bias": 1.0, "hidden": [16]})
    seed = _resolve_seed(c.get("seed"))
    if c.get("bias") is None:
        raise UsageError("--bias is required")
    if c["method"] not in MIXTURE_METHODS:
        raise UsageError(f"--method must be one of {sorted(MIXTURE_METHODS)}")
    ds = read_dataset(c["data"])
    files = _expert_files(c["experts"])
    experts = [load_expert(f) for f in files]
    b = np.asarray(_read_bias(c["bias"]), dtype=np.float64)
    tcfg = _train_cfg(DEFAULT_MIXTURE_TRAIN, c.get("train"), seed)
    model = new_mixture(experts, ds.x.shape[1], b, MIXTURE_METHODS[c["method"]],
                        tuple(c["hidden"]), seed)
    loss_cfg = BiasLossConfig(float(c["w_bias"])) if c["method"] == "soft" else None
    model, train_log = train_mixture(model, ds, tcfg, loss_cfg)
    out = Path(c["output"])
    out.mkdir(parents=True, exist_ok=True)
    refs = tuple(os.path.relpath(f, out) for f in files)
    model = replace(model, expert_refs=refs)
    save_mixture(model, out / "mixture.json")
    train_log.write_csv(out / "training_log.csv")
    config = {"data_sha256": _sha256(Path(c["data"]) / "data.jsonl"),
              "expert_sha256": [_sha256(f) for f in files], "b": b.tolist(),
              "method": c["method"], "hidden": list(c["hidden"]),
              "w_bias": float(c["w_bias"]) if c["method"] == "soft" else None,
              "train": {"batch_size": tcfg.batch_size, "learning_rate": tcfg.learning_rate,
                        "steps": tcfg.steps}}
    write_manifest(out, "train-mixture", config, seed,
                   [out / "mixture.json", out / "training_log.csv"])
    return EXIT_OK


def sweep_config_from_dict(c: dict) -> SweepConfig:
    """Build a :class:`SweepConfig` from plain JSON-style values."""
    task = c.get("task", "feature")
    seeds = c.get("seeds")
    if seeds is None:
        seeds = [c["seed"]] if c.get("seed") is not None else [0, 1, 2, 3, 4]
    if isinstance(seeds, str):
        seeds = [int(s) for s in seeds.split(",") if s.strip()]
    methods = c.get("methods") or c.get("method") or list(DEFAULT_METHODS)
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    targets = c.get("targets", "auto")
    if isinstance(targets, str) and targets != "auto":
        targets = [float(t) for t in targets.split(",") if t.strip()]
    specs = None if c.get("experts") is None else _expert_specs(c["experts"], task)
    dataset = dict(c.get("dataset") or {})
    if c.get("n_per_class") is not None:
        dataset["n_per_class"] = int(c["n_per_class"])
    expert_train = None
    if c.get("expert_train"):
        expert_train = _train_cfg(DEFAULT_EXPERT_TRAIN.get(task, TrainConfig()),
                                  c["expert_train"], 0)
    mixture_train = _train_cfg(DEFAULT_MIXTURE_TRAIN, c.get("mixture_train"), 0)
    return SweepConfig(task=task, experts=specs,
                       expert_hidden=tuple(c.get("expert_hidden", (32,))),
                       expert_train=expert_train,
                       gating_hidden=tuple(c.get("gating_hidden", (16,))),
                       mixture_train=mixture_train, methods=tuple(methods), targets=targets,
                       seeds=tuple(int(s) for s in seeds),
                       w_bias_grid=tuple(float(w) for w in c.get("w_bias_grid",
                                                                 DEFAULT_W_BIAS_GRID)),
                       budget_slack=float(c.get("budget_slack", 0.01)),
                       random_trials=int(c.get("random_trials", 20)), dataset=dataset)


def _sweep_config_record(cfg: SweepConfig) -> dict:
    def tc(t):
        return None if t is None else {"batch_size": t.batch_size,
                                       "learning_rate": t.learning_rate, "steps": t.steps}
    return {"task": cfg.task,
            "experts": None if cfg.experts is None else [s.to_json() for s in cfg.experts],
            "expert_hidden": list(cfg.expert_hidden), "expert_train": tc(cfg.expert_train),
            "gating_hidden": list(cfg.gating_hidden), "mixture_train": tc(cfg.mixture_train),
            "methods": list(cfg.methods), "targets": cfg.targets, "seeds": list(cfg.seeds),
            "w_bias_grid": list(cfg.w_bias_grid), "budget_slack": cfg.budget_slack,
            "random_trials": cfg.random_trials, "dataset": cfg.dataset}


def cmd_sweep(args) -> int:
    c = _merge(args, {})
    if c.get("seeds") is None and c.get("seed") is None and os.environ.get("BMOE_SEED"):
        c["seed"] = _resolve_seed(None)
    cfg = sweep_config_from_dict(c)
    jobs = int(c.get("jobs") or 1)
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    report = sweep(cfg, jobs=jobs)
    out = Path(c["output"])
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "results.csv")
    report.write_json(out / "report.json")
    write_manifest(out, "sweep", _sweep_config_record(cfg), list(cfg.seeds),
                   [out / "results.csv", out / "report.json"])
    print(json.dumps({m: report.mean_rho(m) for m in report.methods}))
    return EXIT_OK


# ---- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bmoe", description="Biased mixtures of experts.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of defaults; flags override it")
        p.add_argument("--seed", type=int, help="random seed (default: $BMOE_SEED or 0)")
        p.add_argument("-o", "--output", help="output directory")
        return p

    p = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    p.add_argument("--task", choices=["feature", "image"])
    p.add_argument("--n-per-class", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-experts", help="train one expert per preprocessing spec"))
    p.add_argument("--data", help="dataset directory written by gen-data")
    p.add_argument("--experts", help="JSON file or inline JSON list of preprocessing specs")
    p.set_defaults(func=cmd_train_experts)

    p = sub.add_parser("solve-bias", help="bias vector for a cost or performance target")
    p.add_argument("--config")
    p.add_argument("-o", "--output")
    p.add_argument("--experts", help="expert directory written by train-experts")
    p.add_argument("--d", help="JSON array of per-expert data costs")
    p.add_argument("--p", help="JSON array of per-expert performances")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cost", type=float, help="target average data cost d_t")
    g.add_argument("--perf", type=float, help="target expected performance p_t")
    p.set_defaults(func=cmd_solve_bias)

    p = common(sub.add_parser("train-mixture", help="train a gating network over frozen experts"))
    p.add_argument("--data")
    p.add_argument("--experts", help="expert directory written by train-experts")
    p.add_argument("--bias", help="JSON array, or a file written by solve-bias")
    p.add_argument("--method", choices=sorted(MIXTURE_METHODS))
    p.add_argument("--w-bias", type=float, help="bias-loss weight for --method soft")
    p.set_defaults(func=cmd_train_mixture)

    p = common(sub.add_parser("sweep", help="evaluate methods over cost targets and seeds"))
    p.add_argument("--task", choices=["feature", "image"])
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    p.add_argument("--experts", help="JSON file or inline JSON list of preprocessing specs")
    p.add_argument("--method", dest="methods",
                   help=f"comma-separated subset of {','.join(METHOD_NAMES)}")
    p.add_argument("--targets", help="'auto' or comma-separated d_t values in bytes")
    p.add_argument("--jobs", type=int, help="worker processes for independent cells")
    p.add_argument("--n-per-class", type=int)
    p.set_defaults(func=cmd_sweep)
    return ap


_REQUIRED = {"gen-data": ("output",), "train-experts": ("data", "output"),
             "train-mixture": ("data", "experts", "output"), "sweep": ("output",)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(getattr(args, "config", None))
        for name in _REQUIRED.get(args.command, ()):
            if getattr(args, name, None) is None and cfg.get(name) is None:
                raise UsageError(f"--{name.replace('_', '-')} is required")
        return args.func(args)
    except UsageError as exc:
        print(f"bmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverNumericalError, TrainingDivergedError) as exc:
        print(f"bmoe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (RejectedInputError, ConfigurationError, OSError, json.JSONDecodeError,
            KeyError, TypeError) as exc:
        print(f"bmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
