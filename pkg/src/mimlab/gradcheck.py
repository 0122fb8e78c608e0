"""Finite-difference checks for every primitive and for the full student pipeline."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nx
from .loss import LossKind, SupervisionFlags, total_loss
from .masking import random_mask
from .model import ModelBundle, ModelConfig, forward_pipeline, init_bundle
from .numerics import Tensor
from .rng import stream
from .teacher import pseudo_vit, split_targets, teacher_targets

FLAG_SETTINGS = (SupervisionFlags(1, 0), SupervisionFlags(0, 1), SupervisionFlags(1, 1))


def _weights(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    """name -> (f, params). Each f reduces the primitive's output to a scalar via a fixed random projection."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    # keep Smooth-L1 inputs away from the kink at |d| = beta
    magnitude = np.where(rng.random((3, 4)) < 0.5, rng.uniform(0.1, 0.8, (3, 4)), rng.uniform(1.2, 2.0, (3, 4)))
    kinked = rng.choice([-1.0, 1.0], (3, 4)) * magnitude
    w34 = _weights((3, 4), rng)
    w3 = _weights((3,), rng)
    w4x3 = _weights((4, 3), rng)
    w2x4 = _weights((2, 2, 4), rng)
    idx = np.array([[2, 0], [1, 1]])
    batch = rng.standard_normal((2, 3, 4))

    def proj(t: Tensor, w: np.ndarray) -> Tensor:
        return (t * Tensor(w.astype(t.dtype))).sum()

    return {
        "add": (lambda p: proj(p["a"] + p["b"], w34), {"a": a, "b": b[0:1]}),
        "sub": (lambda p: proj(p["a"] - p["b"], w34), {"a": a, "b": b}),
        "mul": (lambda p: proj(p["a"] * p["b"], w34), {"a": a, "b": b}),
        "div": (lambda p: proj(p["a"] / p["b"], w34), {"a": a, "b": pos}),
        "sqrt": (lambda p: proj(nx.sqrt(p["a"]), w34), {"a": pos}),
        "exp": (lambda p: proj(nx.exp(p["a"]), w34), {"a": a}),
        "log": (lambda p: proj(nx.log(p["a"]), w34), {"a": pos}),
        "gelu": (lambda p: proj(nx.gelu(p["a"]), w34), {"a": a}),
        "smooth_l1": (lambda p: proj(nx.smooth_l1(p["a"]), w34), {"a": kinked}),
        "sum": (lambda p: proj(p["a"].sum(axis=1), w3), {"a": a}),
        "mean": (lambda p: proj(p["a"].mean(axis=1), w3), {"a": a}),
        "reshape": (lambda p: proj(p["a"].reshape(4, 3), w4x3), {"a": a}),
        "transpose": (lambda p: proj(p["a"].transpose(1, 0), w4x3), {"a": a}),
        "gather_rows": (lambda p: proj(nx.gather_rows(p["a"], idx), w2x4), {"a": batch}),
        "matmul": (lambda p: proj(nx.matmul(p["a"], p["b"]), _weights((3, 3), np.random.default_rng(1))), {"a": a, "b": b.T.copy()}),
        "softmax": (lambda p: proj(nx.softmax(p["a"], axis=-1), w34), {"a": a}),
        "log_softmax": (lambda p: proj(nx.log_softmax(p["a"], axis=0), w34), {"a": a}),
        "layernorm": (
            lambda p: proj(nx.layernorm(p["a"], p["g"], p["b"]), w34),
            {"a": a, "g": rng.standard_normal(4), "b": rng.standard_normal(4)},
        ),
    }


def check_primitives(eps: float = 1e-3, seed: int = 0) -> dict[str, float]:
    return {name: nx.finite_diff_check(f, params, eps=eps) for name, (f, params) in primitive_cases(seed).items()}


def micro_fixture(seed: int = 0, batch: int = 2, image_size: int = 8, patch_size: int = 4, masked: int = 2):
    """Micro student, PseudoViT targets, random images and per-sample masks."""
    teacher = pseudo_vit("micro", patch_size, seed=seed + 1)
    config = ModelConfig.from_preset("micro", patch_size=patch_size, image_size=(image_size, image_size), target_dim=teacher.out_dim)
    bundle = init_bundle(config, seed)
    rng = stream(seed, "gradcheck/images")
    images = rng.standard_normal((batch, 3, image_size, image_size)).astype(np.float32)
    masks = [random_mask(config.grid, masked, stream(seed, "gradcheck/mask", 0, i)) for i in range(batch)]
    targets = teacher_targets(images, teacher, config.grid)
    return bundle, images, masks, targets


def pipeline_loss_fn(bundle: ModelBundle, images, masks, targets, flags: SupervisionFlags, kind: LossKind):
    t_v, t_m = split_targets(targets, masks)
    names = sorted(bundle.params)
    if not flags.delta_m:
        names = [n for n in names if not n.startswith("decoder.")]
    images64 = images.astype(np.float64)
    frozen = {k: Tensor(v.data.astype(np.float64)) for k, v in bundle.params.items()}

    def f(params):
        model = ModelBundle(bundle.config, {**frozen, **params})
        y_v, y_m = forward_pipeline(model, images64, masks, predict_masked=bool(flags.delta_m))
        return total_loss(y_v, t_v.astype(np.float64), y_m, None if t_m is None else t_m.astype(np.float64), flags, kind)

    return f, {n: bundle.params[n].data for n in names}


def check_pipeline(kind: LossKind | str, flags: SupervisionFlags, probes: int = 20, eps: float = 1e-3, seed: int = 0) -> float:
    bundle, images, masks, targets = micro_fixture(seed)
    f, params = pipeline_loss_fn(bundle, images, masks, targets, flags, LossKind(kind))
    return nx.finite_diff_check(f, params, eps=eps, probes=probes, seed=seed)
