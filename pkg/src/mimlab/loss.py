from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

COSINE_EPS = 1e-8


class LossKind(str, enum.Enum):
    COSINE = "cosine"
    MSE = "mse"
    SMOOTH_L1 = "smooth_l1"


@dataclass(frozen=True)
class SupervisionFlags:
    """Which predictions are supervised: visible (delta_v), masked (delta_m), or both."""

    delta_v: int = 1
    delta_m: int = 1

    def __post_init__(self):
        if self.delta_v not in (0, 1) or self.delta_m not in (0, 1):
            raise ValueError("supervision flags must be 0 or 1")
        if not (self.delta_v or self.delta_m):
            raise ValueError("at least one of delta_v, delta_m must be set")


VISIBLE_ONLY = SupervisionFlags(1, 0)
MASKED_ONLY = SupervisionFlags(0, 1)
BOTH = SupervisionFlags(1, 1)


def _as_const(t, like: Tensor) -> Tensor:
    if isinstance(t, Tensor):
        return t
    return Tensor(np.asarray(t, dtype=like.dtype))


def per_patch_loss(y: Tensor, t, kind: LossKind | str = LossKind.COSINE, beta: float = 1.0) -> Tensor:
    """Loss between prediction and target vectors along the last axis.

    Leading axes are kept, so a [B, n, D] pair yields [B, n] per-patch losses.
    """
    kind = LossKind(kind)
    t = _as_const(t, y)
    if y.shape != t.shape:
        raise DimensionError(f"prediction {y.shape} and target {t.shape} differ")
    if kind is LossKind.COSINE:
        dot = (y * t).sum(axis=-1)
        y_norm = nx.sqrt((y * y).sum(axis=-1))
        t_norm = nx.sqrt((t * t).sum(axis=-1))
        return 1.0 - dot / (y_norm * t_norm + COSINE_EPS)
    diff = y - t
    if kind is LossKind.MSE:
        return (diff * diff).mean(axis=-1)
    return nx.smooth_l1(diff, beta).mean(axis=-1)


def total_loss(
    y_v: Tensor | None,
    t_v,
    y_m: Tensor | None,
    t_m,
    flags: SupervisionFlags,
    kind: LossKind | str = LossKind.COSINE,
) -> Tensor:
    """Count-weighted mean of per-patch losses over the supervised positions, averaged over the batch.

    Per sample: (dv * sum_v l + dm * sum_m l) / (dv * |v| + dm * |m|).
    """
    numer = None
    denom = 0
    for flag, y, t, label in ((flags.delta_v, y_v, t_v, "visible"), (flags.delta_m, y_m, t_m, "masked")):
        if not flag:
            continue
        if y is None or t is None:
            raise ValueError(f"{label} supervision is on but its predictions or targets are missing")
        if y.ndim != 3:
            raise DimensionError(f"expected [B, n, D] predictions, got {y.shape}")
        denom += y.shape[1]
        if y.shape[1] == 0:
            continue
        term = per_patch_loss(y, t, kind).sum(axis=-1)
        numer = term if numer is None else numer + term
    if denom == 0:
        raise ValueError("no patches to supervise")
    if numer is None:
        ref = y_v if flags.delta_v else y_m
        return Tensor(np.zeros((), dtype=ref.dtype))
    return (numer * (1.0 / denom)).mean()
