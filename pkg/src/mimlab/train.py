"""Pre-training loop: augment, mask, predict, supervise against teacher targets, AdamW."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .archive import read_archive, write_archive
from .data import Dataset, Normalization, augment, channel_stats
from .loss import LossKind, SupervisionFlags, total_loss
from .masking import SamplerKind, default_ratio, sample_mask, target_mask_count
from .model import ModelBundle, ModelConfig, forward_pipeline, init_bundle
from .numerics import DimensionError, NonFiniteError, Tensor
from .rng import stream
from .teacher import TargetCache, TargetSeq, Teacher, cache_key, split_targets, teacher_targets

log = logging.getLogger(__name__)

METRICS_FIELDS = ["epoch", "step", "loss", "lr", "gamma", "delta_v", "delta_m", "seed"]


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    warmup_epochs: int | None = None
    lr_peak: float | None = None
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    flags: SupervisionFlags = field(default_factory=SupervisionFlags)
    loss: LossKind = LossKind.COSINE
    sampler: SamplerKind = SamplerKind.BLOCKWISE
    gamma: float | None = None
    seed: int = 0
    model: str = "micro"
    patch_size: int = 4
    image_size: int = 16
    normalize_targets: bool = True
    augment: bool = True
    augment_per_epoch: bool = True
    cache_targets: bool = False
    checkpoint_every: int = 5
    channel_mean: tuple[float, float, float] | None = None
    channel_std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if isinstance(self.flags, Mapping):
            self.flags = SupervisionFlags(**self.flags)
        self.loss = LossKind(self.loss)
        self.sampler = SamplerKind(self.sampler)
        self.betas = tuple(self.betas)
        if self.warmup_epochs is None:
            self.warmup_epochs = self.epochs // 10
        if self.lr_peak is None:
            self.lr_peak = 1.5e-3 * self.batch_size / 256
        if self.gamma is None:
            self.gamma = default_ratio(self.model) if self.model in ("tiny", "small", "base", "large") else 0.5
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if self.lr_min > self.lr_peak:
            raise ValueError("lr_min must not exceed lr_peak")
        for name in ("channel_mean", "channel_std"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, tuple(float(v) for v in val))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = self.loss.value
        d["sampler"] = self.sampler.value
        d["betas"] = list(self.betas)
        for name in ("channel_mean", "channel_std"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**dict(d))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def normalization(self) -> Normalization | None:
        if self.channel_mean is None or self.channel_std is None:
            return None
        return Normalization(self.channel_mean, self.channel_std)


# -- optimizer ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LRSchedule:
    lr_peak: float
    lr_min: float
    warmup_steps: int
    total_steps: int


def lr_at(step: int, sched: LRSchedule) -> float:
    """Linear warmup from 0, then cosine decay reaching lr_min at the last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < sched.warmup_steps:
        return sched.lr_peak * step / sched.warmup_steps
    span = sched.total_steps - 1 - sched.warmup_steps
    t = 1.0 if span <= 0 else min((step - sched.warmup_steps) / span, 1.0)
    return sched.lr_min + 0.5 * (sched.lr_peak - sched.lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only; biases, norm affines and tokens are exempt."""
    return value.ndim >= 2


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update.

    Parameters absent from ``grads`` (not reached by the loss) are left
    untouched, moments included.
    """
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name, p.data):
            update = update + state.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
    state.step = t


# -- data flow ------------------------------------------------------------------------------


def view_seed(seed: int, epoch_key: int) -> int:
    return int(np.random.SeedSequence([seed, epoch_key]).generate_state(1)[0])


def student_view(ds: Dataset, index: int, cfg: TrainConfig, epoch: int, norm: Normalization) -> np.ndarray:
    """The (possibly augmented) standardized image seen by both student and teacher."""
    img = ds.image(index)
    if cfg.augment:
        key = epoch if cfg.augment_per_epoch else 0
        img = augment(img, stream(cfg.seed, "augment", key, index))
    return norm.apply(img)


def model_config_for(cfg: TrainConfig, teacher: Teacher) -> ModelConfig:
    if teacher.patch_size != cfg.patch_size:
        raise DimensionError(f"teacher patch size {teacher.patch_size} != student patch size {cfg.patch_size}")
    return ModelConfig.from_preset(cfg.model, patch_size=cfg.patch_size, image_size=(cfg.image_size, cfg.image_size), target_dim=teacher.out_dim)


@dataclass
class TrainResult:
    bundle: ModelBundle
    optim: OptimState
    metrics: list[dict]
    config: TrainConfig
    checkpoint: Path | None = None
    cache: TargetCache | None = None

    @property
    def final_loss(self) -> float:
        return float(self.metrics[-1]["loss"]) if self.metrics else float("nan")


def _write_metrics(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def save_checkpoint(path: str | Path, result: TrainResult, epoch: int, norm: Normalization) -> Path:
    path = Path(path)
    tensors = {f"model/{k}": v for k, v in result.bundle.state_dict().items()}
    for k in result.optim.m:
        tensors[f"optim/m/{k}"] = result.optim.m[k]
        tensors[f"optim/v/{k}"] = result.optim.v[k]
    write_archive(path, tensors, {"kind": "checkpoint"})
    meta = {
        "config": result.config.to_dict(),
        "config_hash": result.config.config_hash(),
        "model_config": result.bundle.config.to_dict(),
        "epoch": epoch,
        "step": result.optim.step,
        "rng_cursor": {"seed": result.config.seed, "next_epoch": epoch + 1},
        "normalization": {"mean": list(norm.mean), "std": list(norm.std)},
        "metrics": result.metrics,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, OptimState, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    arch = read_archive(path)
    cfg = TrainConfig.from_dict(meta["config"])
    bundle = init_bundle(ModelConfig.from_dict(meta["model_config"]), cfg.seed)
    bundle.load_state_dict({k[len("model/") :]: v for k, v in arch.tensors.items() if k.startswith("model/")})
    optim = OptimState(step=meta["step"], betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    for k, v in arch.tensors.items():
        if k.startswith("optim/m/"):
            optim.m[k[len("optim/m/") :]] = v
        elif k.startswith("optim/v/"):
            optim.v[k[len("optim/v/") :]] = v
    return bundle, optim, meta


def pretrain(
    cfg: TrainConfig,
    dataset: Dataset,
    teacher: Teacher,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after_epoch: int | None = None,
    cache: TargetCache | None = None,
) -> TrainResult:
    """Run (or resume) pre-training.

    Epochs are numbered from 1. ``stop_after_epoch`` ends the run early, as if
    interrupted, after that epoch's checkpoint has been written. Writes
    ``metrics.csv`` and ``checkpoint-epochNNN.caet`` (+ ``.json``) to
    ``out_dir`` when given.
    """
    norm = cfg.normalization()
    if norm is None:
        norm = channel_stats(dataset)
        cfg = dataclasses.replace(cfg, channel_mean=norm.mean, channel_std=norm.std)
    out = Path(out_dir) if out_dir is not None else None
    start_epoch = 1
    metrics: list[dict] = []
    if resume is not None:
        bundle, optim, meta = load_checkpoint(resume)
        if meta["config_hash"] != cfg.config_hash():
            raise ValueError("checkpoint was written by a different configuration")
        start_epoch = meta["epoch"] + 1
        metrics = list(meta["metrics"])
    else:
        bundle = init_bundle(model_config_for(cfg, teacher), cfg.seed)
        optim = OptimState(betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    if cfg.cache_targets and cache is None:
        cache = TargetCache(grid=bundle.config.grid)

    grid = bundle.config.grid
    count = target_mask_count(grid.n, cfg.gamma)
    if count == grid.n:
        raise ValueError("mask ratio leaves no visible patches")
    predict_masked = bool(cfg.flags.delta_m)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sched = LRSchedule(cfg.lr_peak, cfg.lr_min, cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch)
    result = TrainResult(bundle, optim, metrics, cfg, cache=cache)
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    for epoch in range(start_epoch, last_epoch + 1):
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images = np.stack([student_view(dataset, int(i), cfg, epoch, norm) for i in idx])
            masks = [sample_mask(cfg.sampler, grid, count, stream(cfg.seed, "mask", epoch, int(i))) for i in idx]
            lr = lr_at(optim.step, sched)
            try:
                targets = _targets(images, idx, dataset, teacher, cfg, epoch, grid, cache)
                t_v, t_m = split_targets(targets, masks)
                with nx.Graph() as g:
                    y_v, y_m = forward_pipeline(bundle, images, masks, predict_masked=predict_masked)
                    loss = total_loss(y_v, t_v, y_m, t_m, cfg.flags, cfg.loss)
            except NonFiniteError as exc:
                _dump_and_raise(out, cfg, epoch, idx, str(exc))
            if not np.isfinite(loss.data).all():
                _dump_and_raise(out, cfg, epoch, idx, "loss is not finite")
            grads = nx.backward(g, loss)
            adamw_step(bundle.params, grads, optim, lr)
            losses.append(loss.item())
        row = {
            "epoch": epoch,
            "step": optim.step,
            "loss": repr(float(np.mean(losses))),
            "lr": repr(lr_at(max(optim.step - 1, 0), sched)),
            "gamma": repr(count / grid.n),
            "delta_v": cfg.flags.delta_v,
            "delta_m": cfg.flags.delta_m,
            "seed": cfg.seed,
        }
        metrics.append(row)
        log.info("epoch %d loss %s", epoch, row["loss"])
        if out is not None:
            _write_metrics(out / "metrics.csv", metrics)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs or epoch == last_epoch:
                result.checkpoint = save_checkpoint(out / f"checkpoint-epoch{epoch:03d}.caet", result, epoch, norm)
    return result


def _targets(images, idx, dataset, teacher, cfg, epoch, grid, cache):
    if cache is None:
        return teacher_targets(images, teacher, grid, normalize=cfg.normalize_targets)
    epoch_key = epoch if (cfg.augment and cfg.augment_per_epoch) else 0
    aug = view_seed(cfg.seed, epoch_key)
    keys = [cache_key(dataset.dataset_id, int(i), aug) for i in idx]
    found = [cache.get(k) for k in keys]
    missing = [j for j, f in enumerate(found) if f is None]
    if missing:
        fresh = teacher_targets(images[missing], teacher, grid, normalize=cfg.normalize_targets).targets
        for j, t in zip(missing, fresh):
            cache.put(keys[j], t)
            found[j] = t
    return TargetSeq(np.stack(found), grid)


def _dump_and_raise(out: Path | None, cfg: TrainConfig, epoch: int, idx, reason: str):
    dump = {"reason": reason, "seed": cfg.seed, "epoch": epoch, "sample_indices": [int(i) for i in idx]}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"nonfinite-epoch{epoch:03d}.json").write_text(json.dumps(dump, indent=2))
    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} (seed {cfg.seed}): {reason}")
