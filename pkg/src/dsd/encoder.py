"""Patch-transformer encoder with GRMoE blocks.

Pre-norm ViT blocks (attention then FFN, each with a residual); the FFN of
every block listed in ``moe_layers`` is replaced by a GRMoE layer. The image
feature ``f`` is the L2-normalized class token after the final layer norm and
the routing feature ``r`` is the L2-normalized class-token node of the router
in ``routing_layer``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .grmoe import (
    BalanceStats,
    MoEConfig,
    PatchGraph,
    RoutingOutcome,
    build_patch_graph,
    init_experts,
    init_router,
    moe_forward,
)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # (C, H, W)
    domain: str  # "source" | "target"
    label: Optional[int] = None

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if (self.label is not None) != (self.domain == "source"):
            raise ValueError("labels are present exactly for source samples")


@dataclass(frozen=True)
class EncoderConfig:
    image_shape: tuple[int, int, int] = (3, 16, 16)
    patch_size: int = 4
    depth: int = 4
    n_heads: int = 1
    moe_layers: tuple[int, ...] = (1, 3)
    routing_layer: int = 3
    input_norm: bool = True  # per-image, per-channel standardization of pixels
    moe: MoEConfig = field(default_factory=MoEConfig)

    def __post_init__(self):
        c, h, w = self.image_shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} is not divisible by patch size {self.patch_size}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if any(not 0 <= i < self.depth for i in self.moe_layers):
            raise ValueError(f"moe_layers {self.moe_layers} must lie in [0, depth={self.depth})")
        if self.routing_layer not in self.moe_layers:
            raise ValueError(f"routing_layer {self.routing_layer} is not one of moe_layers {self.moe_layers}")
        if self.token_dim % self.n_heads:
            raise ValueError("token_dim must be divisible by n_heads")

    @property
    def token_dim(self) -> int:
        return self.moe.token_dim

    @property
    def routing_dim(self) -> int:
        return self.moe.routing_dim

    @property
    def grid(self) -> tuple[int, int]:
        _, h, w = self.image_shape
        return h // self.patch_size, w // self.patch_size

    @property
    def n_tokens(self) -> int:
        gr, gc = self.grid
        return gr * gc + 1

    @property
    def patch_width(self) -> int:
        return self.image_shape[0] * self.patch_size**2


class EncodedPair(NamedTuple):
    f: np.ndarray
    r: np.ndarray


class EncodeResult(NamedTuple):
    f: Tensor  # (B, D) unit rows
    r: Tensor  # (B, R) unit rows
    outcomes: list[RoutingOutcome]
    stats: list[BalanceStats]


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, t, pw = cfg.token_dim, cfg.n_tokens, cfg.patch_width
    p: dict[str, np.ndarray] = {
        "embed.w": rng.normal(0.0, 1.0 / np.sqrt(pw), (pw, d)),
        "embed.b": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, (d,)),
        "pos": rng.normal(0.0, 0.02, (t, d)),
    }
    for layer in range(cfg.depth):
        pre = f"blk{layer}."
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".scale"] = np.ones(d)
            p[pre + ln + ".shift"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            p[pre + "attn." + name] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        if layer in cfg.moe_layers:
            for k, v in init_router(cfg.moe, rng).items():
                p[pre + "router." + k] = v
            for k, v in init_experts(cfg.moe, rng).items():
                p[pre + "experts." + k] = v
        else:
            p[pre + "ffn.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, 2 * d))
            p[pre + "ffn.b1"] = np.zeros(2 * d)
            p[pre + "ffn.w2"] = rng.normal(0.0, 1.0 / np.sqrt(2 * d), (2 * d, d))
            p[pre + "ffn.b2"] = np.zeros(d)
    p["final.scale"] = np.ones(d)
    p["final.shift"] = np.zeros(d)
    return p


def sub_params(params, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n_patches, C*p*p), patches in row-major grid order."""
    b, c, h, w = pixels.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gr, gc = h // patch_size, w // patch_size
    x = pixels.reshape(b, c, gr, patch_size, gc, patch_size)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gr * gc, c * patch_size * patch_size)


def standardize_images(pixels: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero mean, unit variance per image and channel; constant channels map to zero."""
    mu = pixels.mean(axis=(-2, -1), keepdims=True)
    var = pixels.var(axis=(-2, -1), keepdims=True)
    return (pixels - mu) / np.sqrt(var + eps)


def patch_embed(pixels, cfg: EncoderConfig, params) -> Tensor:
    """Affine patch embedding, class token appended last, plus positional embeddings."""
    if isinstance(pixels, ImageSample):
        pixels = pixels.pixels
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.shape[1:] != tuple(cfg.image_shape):
        raise ValueError(f"expected images of shape {cfg.image_shape}, got {pixels.shape[1:]}")
    if cfg.input_norm:
        pixels = standardize_images(pixels)
    patches = patchify(pixels, cfg.patch_size)
    tok = Tensor(patches) @ ag.as_tensor(params["embed.w"]) + ag.as_tensor(params["embed.b"])
    b = patches.shape[0]
    cls = ag.as_tensor(params["cls"]).reshape(1, 1, cfg.token_dim) * np.ones((b, 1, 1))
    return ag.concat([tok, cls], axis=1) + ag.as_tensor(params["pos"])


def self_attention(x: Tensor, params, prefix: str, n_heads: int) -> Tensor:
    q = x @ ag.as_tensor(params[prefix + "q"])
    k = x @ ag.as_tensor(params[prefix + "k"])
    v = x @ ag.as_tensor(params[prefix + "v"])
    b, t, d = q.shape
    dh = d // n_heads
    if n_heads > 1:
        q, k, v = (z.reshape(b, t, n_heads, dh).swapaxes(1, 2) for z in (q, k, v))
    att = ag.softmax((q @ k.T) * (1.0 / np.sqrt(dh)), axis=-1)
    out = att @ v
    if n_heads > 1:
        out = out.swapaxes(1, 2).reshape(b, t, d)
    return out @ ag.as_tensor(params[prefix + "o"])


def dense_ffn(x: Tensor, params, prefix: str) -> Tensor:
    h = ag.gelu(x @ ag.as_tensor(params[prefix + "w1"]) + ag.as_tensor(params[prefix + "b1"]))
    return h @ ag.as_tensor(params[prefix + "w2"]) + ag.as_tensor(params[prefix + "b2"])


def _ln(x: Tensor, params, prefix: str) -> Tensor:
    return ag.layer_norm(x, ag.as_tensor(params[prefix + "scale"]), ag.as_tensor(params[prefix + "shift"]))


def encode(
    pixels,
    cfg: EncoderConfig,
    params,
    noise: np.random.Generator | None = None,
    graph: PatchGraph | None = None,
) -> EncodeResult:
    """Run the encoder on a batch (B, C, H, W) or a single sample.

    ``params`` may hold arrays (inference) or Tensors with ``requires_grad``.
    ``noise`` switches on gating noise for the load statistics only.
    """
    if graph is None:
        graph = build_patch_graph(*cfg.grid)
    x = patch_embed(pixels, cfg, params)
    outcomes: list[RoutingOutcome] = []
    stats: list[BalanceStats] = []
    r = None
    for layer in range(cfg.depth):
        pre = f"blk{layer}."
        x = x + self_attention(_ln(x, params, pre + "ln1."), params, pre + "attn.", cfg.n_heads)
        h = _ln(x, params, pre + "ln2.")
        if layer in cfg.moe_layers:
            y, outcome, st, rf = moe_forward(
                h,
                cfg.moe,
                sub_params(params, pre + "router."),
                sub_params(params, pre + "experts."),
                graph=graph,
                noise=noise,
            )
            outcomes.append(outcome)
            stats.append(st)
            if layer == cfg.routing_layer:
                r = rf
        else:
            y = dense_ffn(h, params, pre + "ffn.")
        x = x + y
    x = _ln(x, params, "final.")
    f = ag.l2_normalize(x[:, -1, :])
    return EncodeResult(f, ag.l2_normalize(r), outcomes, stats)


def encode_pair(sample: ImageSample, cfg: EncoderConfig, params) -> EncodedPair:
    res = encode(sample.pixels, cfg, params)
    return EncodedPair(res.f.data[0].copy(), res.r.data[0].copy())


def encode_arrays(pixels: np.ndarray, cfg: EncoderConfig, params, batch_size: int = 256):
    """Inference-mode features for many images: (f, r) as numpy arrays."""
    graph = build_patch_graph(*cfg.grid)
    fs, rs = [], []
    for start in range(0, len(pixels), batch_size):
        res = encode(pixels[start : start + batch_size], cfg, params, graph=graph)
        fs.append(res.f.data)
        rs.append(res.r.data)
    if not fs:
        return np.zeros((0, cfg.token_dim)), np.zeros((0, cfg.routing_dim))
    return np.concatenate(fs), np.concatenate(rs)
