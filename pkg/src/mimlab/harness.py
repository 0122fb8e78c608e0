"""Evaluation protocols and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import Dataset, Normalization, channel_stats, load_batch, split_dataset
from .loss import SupervisionFlags
from .model import ModelBundle, encode_all
from .numerics import Tensor
from .rng import stream, truncated_normal
from .teacher import Teacher
from .train import LRSchedule, OptimState, TrainConfig, adamw_step, lr_at, pretrain

log = logging.getLogger(__name__)

SWEEP_FIELDS = [
    "model",
    "gamma",
    "delta_v",
    "delta_m",
    "loss_kind",
    "sampler",
    "seed",
    "final_pretrain_loss",
    "probe_acc",
]


@dataclass
class ProbeConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 64
    weight_decay: float = 0.0
    holdout_fraction: float = 0.25
    seed: int = 0
    pooling: str = "mean"

    def __post_init__(self):
        if self.pooling != "mean":
            raise ValueError("only mean pooling over patch tokens is supported")


@dataclass
class FinetuneConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.05
    warmup_epochs: int = 0
    holdout_fraction: float = 0.25
    seed: int = 0


def _as_normalization(norm, dataset) -> Normalization:
    return norm if norm is not None else channel_stats(dataset)


def extract_features(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    """Mean of the final encoder outputs over all patch tokens, [B, d]."""
    return encode_all(bundle, images).data.mean(axis=1)


def dataset_features(bundle: ModelBundle, ds: Dataset, norm: Normalization, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for start in range(0, len(ds), batch_size):
        images, y = load_batch(ds, range(start, min(start + batch_size, len(ds))))
        feats.append(extract_features(bundle, norm.apply(images)))
        labels.append(y)
    return np.concatenate(feats), np.concatenate(labels)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    return -(nx.log_softmax(logits, axis=-1) * Tensor(onehot)).sum(axis=-1).mean()


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=-1) == labels).mean())


def _classifier(dim: int, num_classes: int, seed: int, tag: str) -> dict[str, Tensor]:
    w = truncated_normal(stream(seed, tag), (dim, num_classes), std=0.02)
    return {
        "classifier.weight": nx.parameter(w, "classifier.weight"),
        "classifier.bias": nx.parameter(np.zeros(num_classes, dtype=np.float32), "classifier.bias"),
    }


def train_linear_classifier(
    train_x: np.ndarray, train_y: np.ndarray, num_classes: int, cfg: ProbeConfig
) -> tuple[dict[str, Tensor], np.ndarray, np.ndarray]:
    """Softmax regression on standardized features; returns (params, mean, std)."""
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    x = ((train_x - mu) / sd).astype(np.float32)
    params = _classifier(x.shape[1], num_classes, cfg.seed, "probe/init")
    state = OptimState(weight_decay=cfg.weight_decay)
    n = x.shape[0]
    steps = math.ceil(n / cfg.batch_size)
    sched = LRSchedule(cfg.lr, 0.0, 0, max(cfg.epochs * steps, 1))
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "probe/shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with nx.Graph() as g:
                logits = nx.matmul(Tensor(x[idx]), params["classifier.weight"]) + params["classifier.bias"]
                loss = cross_entropy(logits, train_y[idx])
            adamw_step(params, nx.backward(g, loss), state, lr_at(state.step, sched))
    return params, mu, sd


def linear_probe(
    bundle: ModelBundle,
    dataset: Dataset,
    cfg: ProbeConfig = ProbeConfig(),
    norm: Normalization | None = None,
) -> float:
    """Held-out top-1 accuracy of an affine classifier on frozen encoder features."""
    norm = _as_normalization(norm, dataset)
    train_ds, test_ds = split_dataset(dataset, cfg.holdout_fraction, cfg.seed)
    train_x, train_y = dataset_features(bundle, train_ds, norm)
    test_x, test_y = dataset_features(bundle, test_ds, norm)
    _check_labels(np.concatenate([train_y, test_y]), dataset.num_classes)
    params, mu, sd = train_linear_classifier(train_x, train_y, dataset.num_classes, cfg)
    logits = ((test_x - mu) / sd) @ params["classifier.weight"].data + params["classifier.bias"].data
    return _accuracy(logits, test_y)


def _finetune_logits(bundle: ModelBundle, clf: Mapping[str, Tensor], images: np.ndarray) -> Tensor:
    pooled = encode_all(bundle, images).mean(axis=1)
    return nx.matmul(pooled, clf["classifier.weight"]) + clf["classifier.bias"]


def finetune(
    bundle: ModelBundle,
    dataset: Dataset,
    cfg: FinetuneConfig = FinetuneConfig(),
    norm: Normalization | None = None,
) -> float:
    """Train encoder and a fresh linear head end to end; held-out top-1.

    The passed bundle is not modified.
    """
    norm = _as_normalization(norm, dataset)
    model = bundle.copy()
    encoder = model.group("encoder")
    train_ds, test_ds = split_dataset(dataset, cfg.holdout_fraction, cfg.seed)
    clf = _classifier(model.config.encoder.dim, dataset.num_classes, cfg.seed, "finetune/init")
    params = {**encoder, **clf}
    state = OptimState(weight_decay=cfg.weight_decay)
    n = len(train_ds)
    steps = math.ceil(n / cfg.batch_size)
    sched = LRSchedule(cfg.lr, 0.0, cfg.warmup_epochs * steps, max(cfg.epochs * steps, 1))
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "finetune/shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            images, labels = load_batch(train_ds, order[start : start + cfg.batch_size])
            _check_labels(labels, dataset.num_classes)
            with nx.Graph() as g:
                loss = cross_entropy(_finetune_logits(model, clf, norm.apply(images)), labels)
            adamw_step(params, nx.backward(g, loss), state, lr_at(state.step, sched))
    correct = 0
    for start in range(0, len(test_ds), 64):
        images, labels = load_batch(test_ds, range(start, min(start + 64, len(test_ds))))
        _check_labels(labels, dataset.num_classes)
        logits = _finetune_logits(model, clf, norm.apply(images)).data
        correct += int((logits.argmax(axis=-1) == labels).sum())
    return correct / len(test_ds)


def params_digest(bundle: ModelBundle, prefix: str = "encoder") -> str:
    h = hashlib.sha256()
    for name, p in sorted(bundle.group(prefix).items()):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


# -- sweeps ----------------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    n: int = 512
    image_size: int = 16
    num_classes: int = 4
    seed: int = 0
    paths: list[str] = field(default_factory=list)

    def build(self):
        from .data import Cifar10Binary, SyntheticDataset

        if self.kind == "synthetic":
            return SyntheticDataset(self.n, self.image_size, self.num_classes, self.seed)
        if self.kind == "cifar10":
            return Cifar10Binary(self.paths)
        raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass
class TeacherSpec:
    kind: str = "pseudo_vit"
    preset: str = "micro"
    seed: int = 1234
    path: str | None = None

    def build(self, patch_size: int) -> Teacher:
        from .teacher import load_teacher, pseudo_vit

        if self.kind == "pseudo_vit":
            return pseudo_vit(self.preset, patch_size, self.seed)
        if self.kind == "loaded":
            if not self.path:
                raise ValueError("a loaded teacher needs a path")
            return load_teacher(self.path)
        raise ValueError(f"unknown teacher kind {self.kind!r}")


@dataclass
class SweepPlan:
    models: list[str] = field(default_factory=lambda: ["micro"])
    gammas: list[float] = field(default_factory=lambda: [0.15, 0.5, 0.75])
    flags: list[SupervisionFlags] = field(default_factory=lambda: [SupervisionFlags(1, 1)])
    loss_kinds: list[str] = field(default_factory=lambda: ["cosine"])
    samplers: list[str] = field(default_factory=lambda: ["blockwise"])
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 20
    train: dict = field(default_factory=dict)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)

    def __post_init__(self):
        self.flags = [f if isinstance(f, SupervisionFlags) else _flags_from(f) for f in self.flags]
        if isinstance(self.probe, Mapping):
            self.probe = ProbeConfig(**self.probe)
        if isinstance(self.dataset, Mapping):
            self.dataset = DatasetSpec(**self.dataset)
        if isinstance(self.teacher, Mapping):
            self.teacher = TeacherSpec(**self.teacher)
        for name in ("models", "gammas", "flags", "loss_kinds", "samplers", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"sweep list {name!r} is empty")

    @classmethod
    def from_dict(cls, d: Mapping) -> SweepPlan:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SweepPlan fields: {sorted(unknown)}")
        return cls(**dict(d))

    def cells(self) -> list[dict]:
        out = []
        for model in self.models:
            for gamma in self.gammas:
                for flags in self.flags:
                    for loss_kind in self.loss_kinds:
                        for sampler in self.samplers:
                            for seed in self.seeds:
                                out.append(
                                    {
                                        "model": model,
                                        "gamma": float(gamma),
                                        "delta_v": flags.delta_v,
                                        "delta_m": flags.delta_m,
                                        "loss_kind": loss_kind,
                                        "sampler": sampler,
                                        "seed": int(seed),
                                    }
                                )
        return out


def _flags_from(f) -> SupervisionFlags:
    if isinstance(f, Mapping):
        return SupervisionFlags(**f)
    return SupervisionFlags(*f)


def cell_key(row: Mapping) -> tuple:
    return (
        str(row["model"]),
        repr(float(row["gamma"])),
        int(row["delta_v"]),
        int(row["delta_m"]),
        str(row["loss_kind"]),
        str(row["sampler"]),
        int(row["seed"]),
    )


def run_cell(plan: SweepPlan, cell: Mapping) -> dict:
    """Pretrain then probe one cell; failures become an error-tagged row."""
    row = dict(cell)
    try:
        ds = plan.dataset.build()
        cfg = TrainConfig(
            **{
                **plan.train,
                "epochs": plan.epochs,
                "model": cell["model"],
                "gamma": cell["gamma"],
                "flags": SupervisionFlags(cell["delta_v"], cell["delta_m"]),
                "loss": cell["loss_kind"],
                "sampler": cell["sampler"],
                "seed": cell["seed"],
            }
        )
        teacher = plan.teacher.build(cfg.patch_size)
        result = pretrain(cfg, ds, teacher)
        probe_cfg = dataclasses.replace(plan.probe, seed=cell["seed"])
        acc = linear_probe(result.bundle, ds, probe_cfg, result.config.normalization())
        row["final_pretrain_loss"] = repr(result.final_loss)
        row["probe_acc"] = repr(acc)
    except Exception as exc:  # recorded in the row, the sweep goes on
        log.exception("sweep cell %s failed", cell)
        row["final_pretrain_loss"] = "nan"
        row["probe_acc"] = f"error:{type(exc).__name__}"
    row["gamma"] = repr(float(row["gamma"]))
    return row


def read_rows(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_sweep(plan: SweepPlan, out_csv: str | Path, parallel: int = 1) -> list[dict]:
    """Run every cell not already present in ``out_csv``; returns the new rows.

    Rows are appended in plan order regardless of ``parallel``.
    """
    out_csv = Path(out_csv)
    done = {cell_key(r) for r in read_rows(out_csv)}
    todo = [c for c in plan.cells() if cell_key(c) not in done]
    if not out_csv.exists():
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n").writeheader()
    new_rows: list[dict] = []

    def append(row: dict) -> None:
        with open(out_csv, "a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n").writerow(row)
        new_rows.append(row)

    if parallel > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for row in pool.map(run_cell, [plan] * len(todo), todo):
                append(row)
    else:
        for cell in todo:
            append(run_cell(plan, cell))
    return new_rows


def mean_probe_by_flags(rows: Sequence[Mapping]) -> dict[tuple[int, int], float]:
    """Average probe accuracy per (delta_v, delta_m) over all other axes."""
    groups: dict[tuple[int, int], list[float]] = {}
    for r in rows:
        try:
            acc = float(r["probe_acc"])
        except ValueError:
            continue
        groups.setdefault((int(r["delta_v"]), int(r["delta_m"])), []).append(acc)
    return {k: float(np.mean(v)) for k, v in groups.items()}
