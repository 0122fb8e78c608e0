"""Frozen per-patch target provider and target caching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .archive import ArchiveFormatError, read_archive, write_archive
from .masking import MaskSpec
from .model import ENCODER_PRESETS, EncoderConfig, init_param, vit_shapes, vit_stack
from .numerics import DimensionError, Tensor, standardize
from .patching import PatchGrid, embed_patches, patchify, sincos_pos_embed


@dataclass
class Teacher:
    """A frozen ViT. Its tensors never require gradients."""

    config: EncoderConfig
    patch_size: int
    params: dict[str, Tensor]
    channels: int = 3
    layer: str = "final"
    metadata: dict = field(default_factory=dict)

    @property
    def out_dim(self) -> int:
        return self.params["teacher.norm.weight"].shape[0]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path: str | Path) -> Path:
        meta = {
            "kind": "vit",
            "config": {"layers": self.config.layers, "dim": self.config.dim, "heads": self.config.heads, "mlp_ratio": self.config.mlp_ratio},
            "patch_size": self.patch_size,
            "channels": self.channels,
            "layer": self.layer,
            **self.metadata,
        }
        return write_archive(path, self.state_dict(), meta)


def pseudo_vit(preset: str = "micro", patch_size: int = 4, seed: int = 1234, channels: int = 3) -> Teacher:
    """Seeded, randomly initialized frozen ViT with a CLS token.

    Projections use Xavier-uniform initialization so that the features depend
    on image content rather than mostly on position.
    """
    cfg = ENCODER_PRESETS[preset.lower()]
    shapes = vit_shapes("teacher", cfg, patch_size * patch_size * channels)
    shapes["teacher.cls_token"] = (cfg.dim,)
    params = {name: Tensor(init_param(name, shape, seed, scheme="xavier")) for name, shape in sorted(shapes.items())}
    return Teacher(cfg, patch_size, params, channels, metadata={"source": "pseudo_vit", "seed": seed, "preset": preset.lower()})


def load_teacher(path: str | Path) -> Teacher:
    arch = read_archive(path)
    meta = arch.metadata
    try:
        cfg = EncoderConfig(**meta["config"])
        patch_size = int(meta["patch_size"])
    except (KeyError, TypeError) as exc:
        raise ArchiveFormatError(f"teacher archive metadata is incomplete: {exc}") from None
    channels = int(meta.get("channels", 3))
    required = vit_shapes("teacher", cfg, patch_size * patch_size * channels)
    for name, shape in required.items():
        if name not in arch.tensors:
            raise ArchiveFormatError(f"teacher archive is missing {name}")
        if arch.tensors[name].shape != tuple(shape):
            raise ArchiveFormatError(f"{name} has shape {arch.tensors[name].shape}, expected {shape}")
    params = {k: Tensor(v) for k, v in arch.tensors.items()}
    extra = {k: v for k, v in meta.items() if k not in ("config", "patch_size", "channels", "layer", "kind")}
    return Teacher(cfg, patch_size, params, channels, layer=meta.get("layer", "final"), metadata=extra)


@dataclass
class TargetSeq:
    targets: np.ndarray
    grid: PatchGrid


def teacher_targets(images: np.ndarray, teacher: Teacher, grid: PatchGrid | None = None, normalize: bool = True) -> TargetSeq:
    """Per-patch teacher features for the full (unmasked) images, [B, N, D_t]."""
    images = np.asarray(images, dtype=np.float32)
    own = PatchGrid.for_image(images.shape[2], images.shape[3], teacher.patch_size)
    if grid is not None and grid != own:
        raise DimensionError(f"teacher grid {own} does not match student grid {grid}")
    p = teacher.params
    cfg = teacher.config
    patches = Tensor(patchify(images, teacher.patch_size))
    pos = sincos_pos_embed(own.h, own.w, cfg.dim)
    x = embed_patches(patches, p["teacher.patch_embed.weight"], p["teacher.patch_embed.bias"], pos)
    cls = p.get("teacher.cls_token")
    if cls is not None:
        tokens = np.broadcast_to(cls.data, (x.shape[0], 1, cfg.dim))
        x = Tensor(np.concatenate([tokens, x.data], axis=1))
    out = vit_stack(x, p, "teacher", cfg).data
    if cls is not None:
        out = out[:, 1:]
    if normalize:
        out = standardize(out.astype(np.float64)).astype(np.float32)
    return TargetSeq(np.ascontiguousarray(out, dtype=np.float32), own)


def split_targets(seq: TargetSeq, masks: MaskSpec | Sequence[MaskSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the targets at the visible and masked positions of each sample."""
    t = seq.targets
    if isinstance(masks, MaskSpec):
        masks = [masks] * t.shape[0]
    for m in masks:
        if m.grid != seq.grid:
            raise DimensionError("mask grid does not match target grid")
    rows = np.arange(t.shape[0])[:, None]
    vis = np.stack([m.visible for m in masks])
    msk = np.stack([m.masked for m in masks])
    return t[rows, vis], t[rows, msk]


def merge_targets(t_v: np.ndarray, t_m: np.ndarray, masks: Sequence[MaskSpec]) -> np.ndarray:
    """Inverse of split_targets."""
    b = t_v.shape[0]
    n = masks[0].grid.n
    out = np.zeros((b, n, t_v.shape[-1]), dtype=t_v.dtype)
    rows = np.arange(b)[:, None]
    out[rows, np.stack([m.visible for m in masks])] = t_v
    out[rows, np.stack([m.masked for m in masks])] = t_m
    return out


def cache_key(dataset_id: str, sample_id: int, aug_seed: int) -> str:
    return f"{dataset_id}/{int(sample_id)}/{int(aug_seed)}"


class TargetCache:
    """In-memory (dataset id, sample id, augmentation seed) -> targets store."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, grid: PatchGrid | None = None):
        self.entries: dict[str, np.ndarray] = dict(entries or {})
        self.grid = grid
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> np.ndarray | None:
        val = self.entries.get(key)
        if val is None:
            self.misses += 1
        else:
            self.hits += 1
        return val

    def put(self, key: str, value: np.ndarray) -> None:
        self.entries[key] = value

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def save(self, path: str | Path, metadata: Mapping | None = None) -> Path:
        meta = dict(metadata or {})
        if self.grid is not None:
            meta["grid"] = [self.grid.h, self.grid.w, self.grid.patch_size]
        return write_archive(path, self.entries, meta)

    @classmethod
    def load(cls, path: str | Path) -> TargetCache:
        arch = read_archive(path)
        grid = PatchGrid(*arch.metadata["grid"]) if "grid" in arch.metadata else None
        return cls(arch.tensors, grid)


def export_targets(dataset, teacher: Teacher, path: str | Path, seed: int, normalize: bool = True, batch_size: int = 64, view_fn=None) -> Path:
    """Compute and archive targets for every sample of ``dataset``.

    ``view_fn(index) -> image`` produces the teacher's input view; by default
    the raw image. Entries are keyed by cache_key(dataset_id, index, seed).
    """
    cache = TargetCache()
    view_fn = view_fn or dataset.image
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        images = np.stack([view_fn(i) for i in idx])
        seq = teacher_targets(images, teacher, normalize=normalize)
        cache.grid = seq.grid
        for i, t in zip(idx, seq.targets):
            cache.put(cache_key(dataset.dataset_id, i, seed), t)
    return cache.save(path, {"dataset_id": dataset.dataset_id, "seed": seed, "normalize": normalize})


def load_targets(path: str | Path, dataset_id: str, sample_ids: Sequence[int], seed: int) -> TargetSeq:
    cache = TargetCache.load(path)
    rows = []
    for i in sample_ids:
        key = cache_key(dataset_id, i, seed)
        if key not in cache.entries:
            raise KeyError(f"no cached targets for {key}")
        rows.append(cache.entries[key])
    if cache.grid is None:
        raise ArchiveFormatError("target archive has no grid metadata")
    return TargetSeq(np.stack(rows), cache.grid)
