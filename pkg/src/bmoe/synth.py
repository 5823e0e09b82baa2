"""Synthetic tasks with planted cost structure, input reductions and experts.

Two generators:

* ``gen_feature_task``: Gaussian clusters in the plane. Most classes sit in one
  column and need both coordinates; the last two classes share a vertical
  position and are told apart by the first coordinate alone.
* ``gen_image_task``: single-channel images. Low-frequency classes carry a
  block pattern that survives average pooling down to 4x4; high-frequency
  classes are identified only by a period-2 or period-4 texture that pooling
  erases, on top of a decoy block pattern drawn from any class.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, RejectedInputError
from .nn import (DenseNet, TrainConfig, forward, from_checkpoint, init_dense,
                 to_checkpoint, train_classifier)

BYTES_PER_VALUE = 4
MIN_PER_CLASS = 50
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class PreprocessSpec:
    kind: str  # "feature_mask" | "avg_pool_subsample"
    features: tuple[int, ...] | None = None
    resolution: int | None = None
    source_resolution: int | None = None
    channels: int = 1
    bytes_per_value: int = BYTES_PER_VALUE

    def __post_init__(self):
        if self.bytes_per_value < 1:
            raise ConfigurationError("bytes_per_value must be positive")
        if self.kind == "feature_mask":
            feats = tuple(int(i) for i in (self.features or ()))
            if not feats:
                raise ConfigurationError("feature_mask needs a nonempty feature set")
            if min(feats) < 0 or len(set(feats)) != len(feats):
                raise ConfigurationError("feature indices must be distinct and >= 0")
            object.__setattr__(self, "features", feats)
        elif self.kind == "avg_pool_subsample":
            r, src = self.resolution, self.source_resolution
            if not r or not src or r < 1 or src < 1:
                raise ConfigurationError("avg_pool_subsample needs resolution and source_resolution")
            if src % r:
                raise ConfigurationError(f"resolution {r} does not divide {src}")
            if self.channels < 1:
                raise ConfigurationError("channels must be positive")
        else:
            raise ConfigurationError(f"unknown preprocessing kind {self.kind!r}")

    @property
    def n_values(self) -> int:
        if self.kind == "feature_mask":
            return len(self.features)
        return self.channels * self.resolution ** 2

    @property
    def data_cost_bytes(self) -> int:
        return self.n_values * self.bytes_per_value

    def to_json(self) -> dict:
        d = asdict(self)
        if d["features"] is not None:
            d["features"] = list(d["features"])
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessSpec":
        d = dict(d)
        if "K" in d:
            d["bytes_per_value"] = d.pop("K")
        if d.get("features") is not None:
            d["features"] = tuple(d["features"])
        return cls(**d)


def image_cost_bytes(channels: int, resolution: int, bytes_per_value: int = BYTES_PER_VALUE) -> int:
    """Bytes needed to ship a ``channels x resolution x resolution`` input."""
    return channels * resolution * resolution * bytes_per_value


def preprocess(spec: PreprocessSpec, x) -> np.ndarray:
    """Apply the input reduction of ``spec`` to one input or a batch.

    Feature masks act on the last axis. Average pooling accepts images shaped
    (R, R), (C, R, R) or (M, C, R, R) and keeps that rank; for flattened
    inputs use :func:`expert_input`.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "feature_mask":
        if x.ndim == 0 or max(spec.features) >= x.shape[-1]:
            raise RejectedInputError(
                f"mask {spec.features} incompatible with input of shape {x.shape}")
        return x[..., list(spec.features)]
    src, r = spec.source_resolution, spec.resolution
    if x.ndim < 2 or x.shape[-2:] != (src, src):
        raise RejectedInputError(f"expected {src}x{src} images, got shape {x.shape}")
    if x.ndim >= 3 and x.shape[-3] != spec.channels:
        raise RejectedInputError(f"expected {spec.channels} channels, got {x.shape[-3]}")
    if x.ndim == 2 and spec.channels != 1:
        raise RejectedInputError("a bare 2-D image is single-channel")
    k = src // r
    pooled = x.reshape(*x.shape[:-2], r, k, r, k).mean(axis=(-3, -1))
    return pooled


def expert_input(spec: PreprocessSpec, x_flat) -> np.ndarray:
    """Reduce flattened inputs (rows) to the flattened expert view."""
    x = np.asarray(x_flat, dtype=np.float64)
    single = x.ndim == 1
    x = x[None, :] if single else x
    if spec.kind == "feature_mask":
        out = preprocess(spec, x)
    else:
        src, c = spec.source_resolution, spec.channels
        if x.shape[1] != c * src * src:
            raise RejectedInputError(
                f"flat input has {x.shape[1]} values, expected {c * src * src}")
        out = preprocess(spec, x.reshape(-1, c, src, src)).reshape(len(x), -1)
    return out[0] if single else out


@dataclass
class Dataset:
    x: np.ndarray  # (n_examples, D), images flattened channel-major
    y: np.ndarray  # (n_examples,) int
    shape: tuple[int, ...]  # shape of one example before flattening
    n_classes: int
    splits: dict[str, np.ndarray]
    task: str
    config: dict
    seed: int
    meta: dict = field(default_factory=dict)  # per-class annotations

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.x[idx], self.y[idx]


def stratified_split(y, rng: np.random.Generator, fractions=SPLIT_FRACTIONS) -> dict[str, np.ndarray]:
    """Per-class shuffled 80/10/10 (by default) split into train/val/test."""
    y = np.asarray(y)
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    # shuffle across classes so in-order batching is not class-sorted
    return {k: rng.permutation(np.concatenate(v)) for k, v in parts.items()}


@dataclass(frozen=True)
class FeatureTaskConfig:
    n_classes: int = 6
    n_per_class: int = 500
    cluster_sd: float = 0.35
    spacing: float = 2.0
    planted_f2_sd: float = 1.0
    # f1 offset of the dense class bordering the planted pair
    border_shift: float = 1.2


def _check_per_class(n_per_class):
    if n_per_class < MIN_PER_CLASS:
        raise ConfigurationError(
            f"n_per_class must be >= {MIN_PER_CLASS}, got {n_per_class}")


def feature_task_means(cfg: FeatureTaskConfig) -> np.ndarray:
    n_dense = cfg.n_classes - 2
    means = [(-2.0, cfg.spacing * (k - (n_dense - 1) / 2) - 1.0) for k in range(n_dense)]
    means[-1] = (-2.0 + cfg.border_shift, means[-1][1])
    means += [(2.0, 1.0), (2.0 + cfg.spacing, 1.0)]
    return np.array(means)


def gen_feature_task(n_classes: int = 6, n_per_class: int = 500, seed: int = 0,
                     **overrides) -> Dataset:
    cfg = FeatureTaskConfig(n_classes=n_classes, n_per_class=n_per_class, **overrides)
    _check_per_class(cfg.n_per_class)
    if cfg.n_classes < 4:
        raise ConfigurationError("feature task needs at least 4 classes")
    rng = np.random.default_rng(seed)
    means = feature_task_means(cfg)
    xs, ys = [], []
    planted = list(range(cfg.n_classes - 2, cfg.n_classes))
    for c, mu in enumerate(means):
        sd = np.array([cfg.cluster_sd, cfg.planted_f2_sd if c in planted else cfg.cluster_sd])
        xs.append(mu + sd * rng.standard_normal((cfg.n_per_class, 2)))
        ys.append(np.full(cfg.n_per_class, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    splits = stratified_split(y, rng)
    return Dataset(x, y, (2,), cfg.n_classes, splits, "feature", asdict(cfg), seed,
                   meta={"planted_classes": planted})


@dataclass(frozen=True)
class ImageTaskConfig:
    r_max: int = 16
    n_classes: int = 6
    n_per_class: int = 300
    noise_sd: float = 0.5
    texture_amplitude: float = 1.0
    signature_resolution: int = 4


_TEXTURES = [(2, "v"), (4, "v"), (2, "h"), (4, "h"), (2, "c"), (4, "c")]


def _texture(r, period, orient):
    wave = np.where((np.arange(r) % period) < period // 2, 1.0, -1.0)
    if orient == "v":
        return np.tile(wave, (r, 1))
    if orient == "h":
        return np.tile(wave[:, None], (1, r))
    return np.outer(wave, wave)


def gen_image_task(r_max: int = 16, n_classes: int = 6, n_per_class: int = 300,
                   seed: int = 0, **overrides) -> Dataset:
    cfg = ImageTaskConfig(r_max=r_max, n_classes=n_classes, n_per_class=n_per_class, **overrides)
    _check_per_class(cfg.n_per_class)
    r, rs = cfg.r_max, cfg.signature_resolution
    if r < 8 or r & (r - 1):
        raise ConfigurationError(f"r_max must be a power of 2 and >= 8, got {r}")
    if r % rs:
        raise ConfigurationError("signature resolution must divide r_max")
    n_low = cfg.n_classes // 2
    n_high = cfg.n_classes - n_low
    if n_low < 1 or n_high < 1 or n_high > 2 * len(_TEXTURES):
        raise ConfigurationError(f"n_classes must be in [2, {4 * len(_TEXTURES)}]")
    rng = np.random.default_rng(seed)
    signatures = rng.choice([-1.0, 1.0], size=(cfg.n_classes, rs, rs))
    block = np.ones((r // rs, r // rs))
    upsampled = np.stack([np.kron(s, block) for s in signatures])
    textures = []
    for j in range(n_high):
        period, orient = _TEXTURES[j % len(_TEXTURES)]
        sign = -1.0 if j >= len(_TEXTURES) else 1.0
        textures.append(sign * cfg.texture_amplitude * _texture(r, period, orient))
    xs, ys = [], []
    for c in range(cfg.n_classes):
        if c < n_low:
            base = np.broadcast_to(upsampled[c], (cfg.n_per_class, r, r))
        else:
            decoy = rng.integers(0, cfg.n_classes, size=cfg.n_per_class)
            base = upsampled[decoy] + textures[c - n_low]
        img = base + cfg.noise_sd * rng.standard_normal((cfg.n_per_class, r, r))
        xs.append(img.reshape(cfg.n_per_class, -1))
        ys.append(np.full(cfg.n_per_class, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    splits = stratified_split(y, rng)
    meta = {"low_frequency_classes": list(range(n_low)),
            "high_frequency_classes": list(range(n_low, cfg.n_classes))}
    return Dataset(x, y, (1, r, r), cfg.n_classes, splits, "image", asdict(cfg), seed, meta)


def generate(task: str, seed: int, **kwargs) -> Dataset:
    if task == "feature":
        return gen_feature_task(seed=seed, **kwargs)
    if task == "image":
        return gen_image_task(seed=seed, **kwargs)
    raise ConfigurationError(f"unknown task {task!r}")


def default_expert_specs(task: str, dataset: Dataset | None = None) -> list[PreprocessSpec]:
    """Cheapest first: f1 only / full features, or 4x4 / 8x8 / full-res views."""
    if task == "feature":
        return [PreprocessSpec("feature_mask", features=(0,)),
                PreprocessSpec("feature_mask", features=(0, 1))]
    if task == "image":
        r = dataset.shape[-1] if dataset is not None else ImageTaskConfig.r_max
        specs, res = [], 4
        while res <= r:
            specs.append(PreprocessSpec("avg_pool_subsample", resolution=res,
                                        source_resolution=r, channels=1))
            res *= 2
        return specs
    raise ConfigurationError(f"unknown task {task!r}")


# hand-tuned so the planted tasks saturate in well under a second per expert
DEFAULT_EXPERT_TRAIN = {
    "feature": TrainConfig(batch_size=128, learning_rate=0.1, steps=3000),
    "image": TrainConfig(batch_size=128, learning_rate=0.05, steps=2000),
}


@dataclass(frozen=True)
class ExpertSpec:
    id: int
    preprocess: PreprocessSpec
    net: DenseNet
    val_performance: float

    @property
    def data_cost_bytes(self) -> int:
        return self.preprocess.data_cost_bytes


def expert_logits(expert: ExpertSpec, x_flat) -> np.ndarray:
    return forward(expert.net, expert_input(expert.preprocess, x_flat))


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))


def train_expert(dataset: Dataset, spec: PreprocessSpec, hidden=(32,),
                 cfg: TrainConfig | None = None, expert_id: int = 0) -> ExpertSpec:
    """Fit a dense classifier on the reduced view and record its val accuracy."""
    for name in ("train", "val"):
        if name not in dataset.splits or len(dataset.splits[name]) == 0:
            raise ConfigurationError(f"dataset lacks a nonempty {name} split")
    cfg = cfg or DEFAULT_EXPERT_TRAIN.get(dataset.task, TrainConfig())
    x_tr, y_tr = dataset.split("train")
    x_tr = expert_input(spec, x_tr)
    net = init_dense([x_tr.shape[1], *hidden, dataset.n_classes],
                     seed=cfg.seed * 1000 + expert_id)
    net, _ = train_classifier(net, x_tr, y_tr, cfg)
    x_val, y_val = dataset.split("val")
    p = accuracy(forward(net, expert_input(spec, x_val)), y_val)
    return ExpertSpec(expert_id, spec, net, p)


def train_experts(dataset: Dataset, specs, hidden=(32,), cfg: TrainConfig | None = None):
    return [train_expert(dataset, s, hidden, cfg, expert_id=i) for i, s in enumerate(specs)]


# ---- files -----------------------------------------------------------------

def expert_to_json(expert: ExpertSpec) -> dict:
    obj = to_checkpoint(expert.net)
    obj.update({"id": expert.id, "preprocess": expert.preprocess.to_json(),
                "cost_bytes": expert.data_cost_bytes, "val_perf": expert.val_performance})
    return obj


def expert_from_json(obj: dict) -> ExpertSpec:
    spec = PreprocessSpec.from_json(obj["preprocess"])
    if "cost_bytes" in obj and obj["cost_bytes"] != spec.data_cost_bytes:
        raise RejectedInputError("stored cost_bytes disagrees with the preprocessing spec")
    return ExpertSpec(int(obj.get("id", 0)), spec, from_checkpoint(obj), float(obj["val_perf"]))


def save_expert(expert: ExpertSpec, path) -> None:
    Path(path).write_text(json.dumps(expert_to_json(expert)))


def load_expert(path) -> ExpertSpec:
    return expert_from_json(json.loads(Path(path).read_text()))


def write_dataset(ds: Dataset, out_dir) -> tuple[Path, Path]:
    """Write ``data.jsonl`` (one example per line) and the ``dataset.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_path, meta_path = out / "data.jsonl", out / "dataset.json"
    with open(data_path, "w") as fh:
        for xi, yi in zip(ds.x, ds.y):
            fh.write(json.dumps({"x": xi.tolist(), "y": int(yi)}) + "\n")
    sidecar = {"task": ds.task, "seed": ds.seed, "config": ds.config,
               "shape": list(ds.shape), "n_classes": ds.n_classes, "meta": ds.meta,
               "splits": {k: v.tolist() for k, v in ds.splits.items()}}
    meta_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return data_path, meta_path


def read_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    side = json.loads((src / "dataset.json").read_text())
    xs, ys = [], []
    with open(src / "data.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            xs.append(rec["x"])
            ys.append(rec["y"])
    return Dataset(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64),
                   tuple(side["shape"]), side["n_classes"],
                   {k: np.array(v, dtype=np.int64) for k, v in side["splits"].items()},
                   side["task"], side["config"], side["seed"], side.get("meta", {}))
