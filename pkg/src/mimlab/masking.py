"""Visible/masked patch partitions via random or block-wise sampling."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .patching import PatchGrid


class SamplerKind(str, enum.Enum):
    RANDOM = "random"
    BLOCKWISE = "blockwise"


class ModelSize(str, enum.Enum):
    TINY = "tiny"
    SMALL = "small"
    BASE = "base"
    LARGE = "large"


_DEFAULT_RATIOS = {
    ModelSize.TINY: 0.15,
    ModelSize.SMALL: 0.25,
    ModelSize.BASE: 0.50,
    ModelSize.LARGE: 0.50,
}

MIN_BLOCK_AREA = 16
ASPECT_RANGE = (0.3, 1 / 0.3)


@dataclass(frozen=True, eq=False)
class MaskSpec:
    grid: PatchGrid
    visible: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        n = self.grid.n
        vis = np.asarray(self.visible, dtype=np.int64)
        msk = np.asarray(self.masked, dtype=np.int64)
        if vis.size + msk.size != n:
            raise ValueError("visible and masked sets must cover the grid")
        both = np.concatenate([vis, msk])
        if both.size and (both.min() < 0 or both.max() >= n):
            raise IndexError("patch index out of range")
        if np.unique(both).size != n:
            raise ValueError("visible and masked sets overlap")
        if np.any(np.diff(vis) <= 0) or np.any(np.diff(msk) <= 0):
            raise ValueError("index lists must be strictly increasing")
        vis.flags.writeable = False
        msk.flags.writeable = False
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "masked", msk)

    @classmethod
    def from_bool(cls, grid: PatchGrid, masked: np.ndarray) -> MaskSpec:
        masked = np.asarray(masked, dtype=bool).reshape(-1)
        return cls(grid, np.flatnonzero(~masked), np.flatnonzero(masked))

    @property
    def gamma(self) -> float:
        return self.masked.size / self.grid.n

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.grid.n, dtype=bool)
        out[self.masked] = True
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskSpec):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.visible, other.visible)
            and np.array_equal(self.masked, other.masked)
        )

    def render(self) -> str:
        """Text grid: '.' visible, '#' masked."""
        cells = np.where(self.as_bool(), "#", ".").reshape(self.grid.h, self.grid.w)
        return "\n".join("".join(row) for row in cells)


def target_mask_count(n: int, gamma: float) -> int:
    """round-half-up(gamma * n), clamped to [0, n]."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"mask ratio {gamma} outside [0, 1]")
    # Decimal on the repr keeps 0.15 * 196 = 29.4 from drifting across the .5 boundary.
    exact = Decimal(repr(float(gamma))) * n
    count = int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(max(count, 0), n)


def _check_count(grid: PatchGrid, count: int) -> None:
    if not 0 <= count <= grid.n:
        raise ValueError(f"mask count {count} outside [0, {grid.n}]")


def random_mask(grid: PatchGrid, count: int, rng: np.random.Generator) -> MaskSpec:
    _check_count(grid, count)
    chosen = rng.choice(grid.n, size=count, replace=False)
    masked = np.zeros(grid.n, dtype=bool)
    masked[chosen] = True
    return MaskSpec.from_bool(grid, masked)


def blockwise_mask(grid: PatchGrid, count: int, rng: np.random.Generator) -> MaskSpec:
    """Cover the grid with random rectangles, then trim to exactly ``count`` cells.

    Block area is uniform in [min(16, count), max(that, count - masked so far)],
    aspect ratio log-uniform in [0.3, 10/3]; rectangles may overlap.
    """
    _check_count(grid, count)
    if count == grid.n:
        return MaskSpec.from_bool(grid, np.ones(grid.n, dtype=bool))
    cells = np.zeros((grid.h, grid.w), dtype=bool)
    masked_so_far = 0
    lo_area = min(MIN_BLOCK_AREA, count)
    log_lo, log_hi = math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])
    while masked_so_far < count:
        area = rng.uniform(lo_area, max(lo_area, count - masked_so_far))
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        bh = min(max(math.floor(math.sqrt(area * aspect) + 0.5), 1), grid.h)
        bw = min(max(math.floor(math.sqrt(area / aspect) + 0.5), 1), grid.w)
        top = int(rng.integers(0, grid.h - bh + 1))
        left = int(rng.integers(0, grid.w - bw + 1))
        cells[top : top + bh, left : left + bw] = True
        masked_so_far = int(cells.sum())
    flat = cells.reshape(-1)
    excess = masked_so_far - count
    if excess:
        drop = rng.choice(np.flatnonzero(flat), size=excess, replace=False)
        flat[drop] = False
    return MaskSpec.from_bool(grid, flat)


def sample_mask(kind: SamplerKind | str, grid: PatchGrid, count: int, rng: np.random.Generator) -> MaskSpec:
    kind = SamplerKind(kind)
    if kind is SamplerKind.RANDOM:
        return random_mask(grid, count, rng)
    return blockwise_mask(grid, count, rng)


def default_ratio(size: ModelSize | str) -> float:
    if not isinstance(size, ModelSize):
        size = str(size).lower()
    try:
        return _DEFAULT_RATIOS[ModelSize(size)]
    except ValueError:
        raise ValueError(f"unknown model size {size!r}") from None
