from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import DimensionError, Tensor, add, matmul


@dataclass(frozen=True)
class PatchGrid:
    h: int
    w: int
    patch_size: int

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0 or self.patch_size <= 0:
            raise ValueError(f"grid extents must be positive: {self}")

    @property
    def n(self) -> int:
        return self.h * self.w

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> PatchGrid:
        if height % patch_size or width % patch_size:
            raise DimensionError(f"{height}x{width} image is not divisible by patch size {patch_size}")
        return cls(height // patch_size, width // patch_size, patch_size)

    def coords(self, index: int) -> tuple[int, int]:
        return divmod(index, self.w)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, P*P*C], patches in row-major grid order.

    Each patch vector is laid out (row, col, channel).
    """
    if images.ndim != 4:
        raise DimensionError(f"expected [B, C, H, W], got {images.shape}")
    b, c, height, width = images.shape
    grid = PatchGrid.for_image(height, width, patch_size)
    p = patch_size
    x = images.reshape(b, c, grid.h, p, grid.w, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(b, grid.n, p * p * c))


def unpatchify(patches: np.ndarray, grid: PatchGrid, channels: int = 3) -> np.ndarray:
    b, n, dim = patches.shape
    p = grid.patch_size
    if n != grid.n or dim != p * p * channels:
        raise DimensionError(f"patches {patches.shape} do not fit {grid} with {channels} channels")
    x = patches.reshape(b, grid.h, grid.w, p, p, channels)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(b, channels, grid.h * p, grid.w * p))


def embed_patches(patches: Tensor, weight: Tensor, bias: Tensor, pos: Tensor | np.ndarray) -> Tensor:
    """Linear projection of every patch plus its positional embedding.

    ``pos`` is either [N, d] (shared by the batch) or [B, N, d] (per-sample
    positions, e.g. after selecting visible patches).
    """
    if patches.shape[-1] != weight.shape[0]:
        raise DimensionError(f"patch width {patches.shape[-1]} != projection input {weight.shape[0]}")
    pos_shape = pos.shape
    if pos_shape[-2] != patches.shape[-2] or pos_shape[-1] != weight.shape[1]:
        raise DimensionError(f"positional table {pos_shape} does not match {patches.shape[:-1]} x {weight.shape[1]}")
    if not isinstance(pos, Tensor):
        pos = Tensor(np.asarray(pos, dtype=patches.dtype))
    return add(add(matmul(patches, weight), bias), pos)


def _sincos_1d(d: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@lru_cache(maxsize=32)
def _sincos_table(h: int, w: int, d: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(h * w), w)
    table = np.concatenate([_sincos_1d(d // 2, rows), _sincos_1d(d // 2, cols)], axis=1)
    table = table.astype(np.float32)
    table.flags.writeable = False
    return table


def sincos_pos_embed(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table of shape [h*w, d].

    The first half of each row encodes the grid row, the second half the
    column; within each half the sines come before the cosines.
    """
    if d % 4:
        raise ValueError(f"embedding width {d} must be divisible by 4")
    return _sincos_table(h, w, d)
