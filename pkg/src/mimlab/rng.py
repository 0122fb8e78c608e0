"""Counter-based random streams keyed by (seed, purpose, epoch, index).

A stream depends only on its key, never on how many draws other streams
made, so results are independent of iteration and thread order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


def stream(seed: int, tag: str, epoch: int = 0, index: int = 0) -> np.random.Generator:
    if min(seed, epoch, index) < 0:
        raise ValueError("stream keys must be non-negative")
    seq = np.random.SeedSequence([int(seed), _tag_key(tag), int(epoch), int(index)])
    return np.random.Generator(np.random.Philox(seq))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they lie within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)
