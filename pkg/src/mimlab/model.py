"""Student network: visible-patch encoder, cross-attention decoder, projection head.

All three parts are plain functions over a flat ``name -> Tensor`` parameter
dict, so the same code runs in float32 for training and float64 for gradient
checks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .masking import MaskSpec
from .numerics import DimensionError, Tensor
from .patching import PatchGrid, embed_patches, patchify, sincos_pos_embed
from .rng import stream, truncated_normal


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    dim: int
    heads: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if min(self.layers, self.dim, self.heads, self.mlp_ratio) <= 0:
            raise ValueError("encoder extents must be positive")


ENCODER_PRESETS = {
    "micro": EncoderConfig(layers=4, dim=64, heads=4),
    "tiny": EncoderConfig(layers=12, dim=192, heads=12),
    "small": EncoderConfig(layers=12, dim=384, heads=6),
    "base": EncoderConfig(layers=12, dim=768, heads=12),
    "large": EncoderConfig(layers=24, dim=1024, heads=16),
}


@dataclass(frozen=True)
class DecoderConfig:
    dim: int
    heads: int
    blocks: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.blocks != 1:
            raise ValueError("the decoder is a single cross-attention block")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    head: HeadConfig
    patch_size: int
    image_size: tuple[int, int]
    channels: int = 3

    def __post_init__(self):
        if self.decoder.dim != self.encoder.dim or self.head.in_dim != self.encoder.dim:
            raise ValueError("decoder and head widths must equal the encoder width")
        object.__setattr__(self, "image_size", tuple(self.image_size))
        PatchGrid.for_image(*self.image_size, self.patch_size)

    @classmethod
    def from_preset(
        cls, preset: str, *, patch_size: int, image_size: Sequence[int], target_dim: int, channels: int = 3
    ) -> ModelConfig:
        try:
            enc = ENCODER_PRESETS[preset.lower()]
        except KeyError:
            raise ValueError(f"unknown model preset {preset!r}") from None
        return cls(
            encoder=enc,
            decoder=DecoderConfig(dim=enc.dim, heads=enc.heads, mlp_ratio=enc.mlp_ratio),
            head=HeadConfig(in_dim=enc.dim, out_dim=target_dim),
            patch_size=patch_size,
            image_size=tuple(image_size),
            channels=channels,
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            decoder=DecoderConfig(**d["decoder"]),
            head=HeadConfig(**d["head"]),
            patch_size=d["patch_size"],
            image_size=tuple(d["image_size"]),
            channels=d.get("channels", 3),
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["image_size"] = list(self.image_size)
        return out

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_image(*self.image_size, self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ModelBundle:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in sorted(self.params)}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> ModelBundle:
        return ModelBundle(
            self.config,
            {k: nx.parameter(v.data.astype(dtype), k) for k, v in self.params.items()},
        )

    def copy(self) -> ModelBundle:
        return self.astype(np.float32)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


# -- parameter construction ----------------------------------------------------------


def _linear_shapes(prefix: str, fan_in: int, fan_out: int) -> dict[str, tuple]:
    return {f"{prefix}.weight": (fan_in, fan_out), f"{prefix}.bias": (fan_out,)}


def _norm_shapes(prefix: str, dim: int) -> dict[str, tuple]:
    return {f"{prefix}.weight": (dim,), f"{prefix}.bias": (dim,)}


def _attn_shapes(prefix: str, dim: int) -> dict[str, tuple]:
    out = {}
    for part in ("q", "k", "v", "proj"):
        out.update(_linear_shapes(f"{prefix}.{part}", dim, dim))
    return out


def _mlp_shapes(prefix: str, dim: int, ratio: int) -> dict[str, tuple]:
    return {**_linear_shapes(f"{prefix}.fc1", dim, dim * ratio), **_linear_shapes(f"{prefix}.fc2", dim * ratio, dim)}


def vit_shapes(prefix: str, cfg: EncoderConfig, patch_dim: int) -> dict[str, tuple]:
    shapes = _linear_shapes(f"{prefix}.patch_embed", patch_dim, cfg.dim)
    for i in range(cfg.layers):
        b = f"{prefix}.blocks.{i}"
        shapes.update(_norm_shapes(f"{b}.norm1", cfg.dim))
        shapes.update(_attn_shapes(f"{b}.attn", cfg.dim))
        shapes.update(_norm_shapes(f"{b}.norm2", cfg.dim))
        shapes.update(_mlp_shapes(f"{b}.mlp", cfg.dim, cfg.mlp_ratio))
    shapes.update(_norm_shapes(f"{prefix}.norm", cfg.dim))
    return shapes


def bundle_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = vit_shapes("encoder", config.encoder, config.patch_dim)
    dec = config.decoder
    shapes["decoder.mask_token"] = (dec.dim,)
    shapes.update(_norm_shapes("decoder.norm_q", dec.dim))
    shapes.update(_norm_shapes("decoder.norm_kv", dec.dim))
    shapes.update(_attn_shapes("decoder.attn", dec.dim))
    shapes.update(_norm_shapes("decoder.norm2", dec.dim))
    shapes.update(_mlp_shapes("decoder.mlp", dec.dim, dec.mlp_ratio))
    shapes.update(_linear_shapes("head.fc", config.head.in_dim, config.head.out_dim))
    shapes.update(_norm_shapes("head.norm", config.head.out_dim))
    return shapes


def init_param(name: str, shape: tuple, seed: int, scheme: str = "trunc_normal") -> np.ndarray:
    """Deterministic initial value for one parameter, keyed by its name."""
    leaf = name.rsplit(".", 1)[-1]
    parent = name.rsplit(".", 2)[-2] if name.count(".") else ""
    if leaf == "bias":
        return np.zeros(shape, dtype=np.float32)
    if len(shape) == 1 and leaf == "weight" and "norm" in parent:
        return np.ones(shape, dtype=np.float32)
    rng = stream(seed, "init/" + name)
    if scheme == "xavier" and len(shape) == 2:
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return truncated_normal(rng, shape, std=0.02)


def init_bundle(config: ModelConfig, seed: int = 0) -> ModelBundle:
    params = {
        name: nx.parameter(init_param(name, shape, seed), name)
        for name, shape in sorted(bundle_shapes(config).items())
    }
    return ModelBundle(config, params)


# -- building blocks ------------------------------------------------------------------


def linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    w = params[f"{prefix}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"{prefix}: input width {x.shape[-1]} != {w.shape[0]}")
    return nx.matmul(x, w) + params[f"{prefix}.bias"]


def norm(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return nx.layernorm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def attention(xq: Tensor, xkv: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Multi-head attention of ``xq`` queries over ``xkv`` keys/values."""
    b, nq, d = xq.shape
    if xkv.shape[1] == 0:
        raise ValueError("attention needs at least one key")
    q = _split_heads(linear(xq, params, f"{prefix}.q"), heads)
    k = _split_heads(linear(xkv, params, f"{prefix}.k"), heads)
    v = _split_heads(linear(xkv, params, f"{prefix}.v"), heads)
    scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * float((d // heads) ** -0.5)
    mixed = nx.matmul(nx.softmax(scores, axis=-1), v)
    mixed = mixed.transpose(0, 2, 1, 3).reshape(b, nq, d)
    return linear(mixed, params, f"{prefix}.proj")


def mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return linear(nx.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def self_attention_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    h = norm(x, params, f"{prefix}.norm1")
    x = x + attention(h, h, params, f"{prefix}.attn", heads)
    return x + mlp(norm(x, params, f"{prefix}.norm2"), params, f"{prefix}.mlp")


def vit_stack(x: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: EncoderConfig) -> Tensor:
    for i in range(cfg.layers):
        x = self_attention_block(x, params, f"{prefix}.blocks.{i}", cfg.heads)
    return norm(x, params, f"{prefix}.norm")


# -- student ---------------------------------------------------------------------------


def encode(bundle: ModelBundle, visible_embedded: Tensor) -> Tensor:
    """Transformer stack over already-embedded visible tokens [B, |v|, d]."""
    cfg = bundle.config.encoder
    if visible_embedded.ndim != 3 or visible_embedded.shape[-1] != cfg.dim:
        raise DimensionError(f"encoder expects [B, n, {cfg.dim}], got {visible_embedded.shape}")
    return vit_stack(visible_embedded, bundle.params, "encoder", cfg)


def decode(bundle: ModelBundle, z_v: Tensor, pos_v: np.ndarray, pos_m: np.ndarray) -> Tensor:
    """Predict latents for masked positions from the visible latents.

    Queries are the mask token plus ``pos_m``; keys and values are ``z_v``
    plus ``pos_v``. Row i of the output belongs to the i-th masked index.
    """
    if pos_m.shape[1] == 0:
        raise ValueError("decode called with no masked positions")
    p = bundle.params
    dtype = z_v.dtype
    queries = p["decoder.mask_token"] + Tensor(np.asarray(pos_m, dtype=dtype))
    context = z_v + Tensor(np.asarray(pos_v, dtype=dtype))
    heads = bundle.config.decoder.heads
    x = queries + attention(norm(queries, p, "decoder.norm_q"), norm(context, p, "decoder.norm_kv"), p, "decoder.attn", heads)
    return x + mlp(norm(x, p, "decoder.norm2"), p, "decoder.mlp")


def head(bundle: ModelBundle, z: Tensor) -> Tensor:
    """FC projection into target space followed by layernorm."""
    if z.shape[-1] != bundle.config.head.in_dim:
        raise DimensionError(f"head expects width {bundle.config.head.in_dim}, got {z.shape[-1]}")
    return norm(linear(z, bundle.params, "head.fc"), bundle.params, "head.norm")


def _stack_indices(masks: Sequence[MaskSpec], grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    for m in masks:
        if m.grid != grid:
            raise DimensionError(f"mask grid {m.grid} does not match model grid {grid}")
    counts = {m.masked.size for m in masks}
    if len(counts) != 1:
        raise ValueError("all masks in a batch must hide the same number of patches")
    return np.stack([m.visible for m in masks]), np.stack([m.masked for m in masks])


def embed_visible(bundle: ModelBundle, images: np.ndarray, visible: np.ndarray) -> Tensor:
    cfg = bundle.config
    dtype = bundle.params["encoder.patch_embed.weight"].dtype
    patches = patchify(np.asarray(images, dtype=dtype), cfg.patch_size)
    grid = cfg.grid
    if patches.shape[1] != grid.n:
        raise DimensionError(f"image grid does not match model grid {grid}")
    rows = np.arange(patches.shape[0])[:, None]
    pos = sincos_pos_embed(grid.h, grid.w, cfg.encoder.dim).astype(dtype)
    p = bundle.params
    return embed_patches(Tensor(patches[rows, visible]), p["encoder.patch_embed.weight"], p["encoder.patch_embed.bias"], pos[visible])


def forward_pipeline(
    bundle: ModelBundle,
    images: np.ndarray,
    masks: MaskSpec | Sequence[MaskSpec],
    predict_masked: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Return (Y_v, Y_m); Y_m is None when masked predictions are not requested."""
    images = np.asarray(images)
    if isinstance(masks, MaskSpec):
        masks = [masks] * images.shape[0]
    if len(masks) != images.shape[0]:
        raise ValueError("need one mask per image")
    cfg = bundle.config
    visible, masked = _stack_indices(masks, cfg.grid)
    if visible.shape[1] == 0:
        raise ValueError("at least one patch must stay visible")
    z_v = encode(bundle, embed_visible(bundle, images, visible))
    y_v = head(bundle, z_v)
    if not predict_masked or masked.shape[1] == 0:
        return y_v, None
    pos = sincos_pos_embed(cfg.grid.h, cfg.grid.w, cfg.encoder.dim)
    z_m = decode(bundle, z_v, pos[visible], pos[masked])
    return y_v, head(bundle, z_m)


def encode_all(bundle: ModelBundle, images: np.ndarray) -> Tensor:
    """Encoder output for every patch (no masking), [B, N, d]."""
    n = bundle.config.grid.n
    visible = np.broadcast_to(np.arange(n), (np.asarray(images).shape[0], n))
    return encode(bundle, embed_visible(bundle, images, visible))
