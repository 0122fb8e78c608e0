"""Image sources, per-channel standardization and the pre-training augmentation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .rng import stream

CIFAR_RECORD = 1 + 3 * 32 * 32


class Dataset(Protocol):
    dataset_id: str
    num_classes: int

    def __len__(self) -> int: ...

    def image(self, index: int) -> np.ndarray: ...

    def label(self, index: int) -> int: ...


class SyntheticDataset:
    """Seeded smooth images built from low-frequency sinusoid mixtures.

    Each sample's label selects the orientation of its dominant grating; the
    remaining components, phases and colour mixing are random. Images lie
    roughly in [0, 1] with shape [3, size, size].
    """

    def __init__(self, n: int, image_size: int = 16, num_classes: int = 4, seed: int = 0, components: int = 3):
        if n <= 0 or image_size <= 0 or num_classes <= 0:
            raise ValueError("dataset extents must be positive")
        self.n = n
        self.image_size = image_size
        self.num_classes = num_classes
        self.seed = seed
        self.components = components
        self.dataset_id = f"synthetic-n{n}-s{image_size}-c{num_classes}-k{components}-seed{seed}"

    def __len__(self) -> int:
        return self.n

    def label(self, index: int) -> int:
        self._check(index)
        return int(stream(self.seed, "synthetic/label", 0, index).integers(self.num_classes))

    def image(self, index: int) -> np.ndarray:
        self._check(index)
        rng = stream(self.seed, "synthetic/image", 0, index)
        label = self.label(index)
        s = self.image_size
        yy, xx = np.meshgrid(np.arange(s) / s, np.arange(s) / s, indexing="ij")
        img = np.zeros((3, s, s))
        for c in range(self.components + 1):
            if c == 0:
                theta = math.pi * label / self.num_classes + rng.uniform(-0.1, 0.1)
                amp, freq = 1.0, rng.uniform(1.5, 2.5)
            else:
                theta = rng.uniform(0, math.pi)
                amp, freq = rng.uniform(0.1, 0.35), rng.uniform(0.5, 3.0)
            wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + rng.uniform(0, 2 * math.pi))
            img += amp * rng.uniform(0.3, 1.0, size=(3, 1, 1)) * wave
        img = 0.5 + 0.25 * img / (1 + 0.35 * self.components)
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    def _check(self, index: int) -> None:
        if not 0 <= index < self.n:
            raise IndexError(f"sample {index} out of range for {self.n}")


class Cifar10Binary:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.

    Pixels are stored channel-major (1024 red, 1024 green, 1024 blue), each a
    32x32 row-major plane.
    """

    num_classes = 10

    def __init__(self, paths: str | Path | Sequence[str | Path]):
        if isinstance(paths, (str, Path)):
            paths = [paths]
        blobs = [Path(p).read_bytes() for p in paths]
        raw = b"".join(blobs)
        if len(raw) % CIFAR_RECORD:
            raise ValueError(f"file size is not a multiple of the {CIFAR_RECORD}-byte record")
        self._records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        self.dataset_id = "cifar10-" + hashlib.sha256(raw).hexdigest()[:16]

    def __len__(self) -> int:
        return self._records.shape[0]

    def label(self, index: int) -> int:
        return int(self._records[index, 0])

    def image(self, index: int) -> np.ndarray:
        return (self._records[index, 1:].reshape(3, 32, 32) / 255.0).astype(np.float32)


class Subset:
    def __init__(self, base: Dataset, indices: Sequence[int]):
        self.base = base
        self.indices = [int(i) for i in indices]
        self.num_classes = base.num_classes
        digest = hashlib.sha256(np.asarray(self.indices, dtype=np.int64).tobytes()).hexdigest()[:12]
        self.dataset_id = f"{base.dataset_id}/subset-{digest}"

    def __len__(self) -> int:
        return len(self.indices)

    def image(self, index: int) -> np.ndarray:
        return self.base.image(self.indices[index])

    def label(self, index: int) -> int:
        return self.base.label(self.indices[index])


def split_dataset(ds: Dataset, holdout_fraction: float, seed: int) -> tuple[Subset, Subset]:
    order = stream(seed, "split").permutation(len(ds))
    cut = len(ds) - max(1, int(round(holdout_fraction * len(ds))))
    return Subset(ds, np.sort(order[:cut])), Subset(ds, np.sort(order[cut:]))


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def apply(self, images: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32).reshape(-1, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(-1, 1, 1)
        return ((images - mean) / std).astype(np.float32)


def channel_stats(ds: Dataset, limit: int | None = None) -> Normalization:
    n = len(ds) if limit is None else min(limit, len(ds))
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    count = 0
    for i in range(n):
        img = ds.image(i).astype(np.float64)
        acc += img.sum(axis=(1, 2))
        acc2 += (img * img).sum(axis=(1, 2))
        count += img.shape[1] * img.shape[2]
    mean = acc / count
    std = np.sqrt(np.maximum(acc2 / count - mean * mean, 1e-12))
    return Normalization(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def random_resized_crop(
    img: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.2, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> np.ndarray:
    """Crop a random area/aspect window and resample it bilinearly to the input size."""
    _, h, w = img.shape
    area = h * w
    crop = None
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = (top, left, ch, cw)
            break
    if crop is None:
        side = min(h, w)
        crop = ((h - side) // 2, (w - side) // 2, side, side)
    top, left, ch, cw = crop
    ys = top + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = left + (np.arange(w) + 0.5) * cw / w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([map_coordinates(c.astype(np.float64), [yy, xx], order=1, mode="nearest") for c in img])
    return out.astype(np.float32)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = random_resized_crop(img, rng)
    if rng.uniform() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def load_batch(ds: Dataset, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([ds.image(int(i)) for i in indices])
    labels = np.asarray([ds.label(int(i)) for i in indices], dtype=np.int64)
    return images, labels
