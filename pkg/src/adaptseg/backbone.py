"""Scaled-down ViT image encoder: patch embedding and pre-norm blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import params as P
from .autograd import DimensionError, Tensor


@dataclass
class BackboneConfig:
    image_size: int = 64
    depth: int = 1
    patch: int = 8
    channels: int = 1
    embed_len: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("image_size", "depth", "patch", "channels", "embed_len", "heads", "blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.embed_len % self.heads:
            raise ValueError(f"embed_len {self.embed_len} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_len * self.mlp_ratio))


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @classmethod
    def init(cls, rng, dim: int, heads: int) -> "AttentionParams":
        wq, bq = P.dense(rng, dim, dim)
        wk, bk = P.dense(rng, dim, dim)
        wv, bv = P.dense(rng, dim, dim)
        wo, bo = P.dense(rng, dim, dim)
        return cls(wq, bq, wk, bk, wv, bv, wo, bo, heads)


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, dim: int, hidden: int) -> "MLPParams":
        w1, b1 = P.dense(rng, dim, hidden)
        w2, b2 = P.dense(rng, hidden, dim)
        return cls(w1, b1, w2, b2)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNormParams":
        return cls(P.ones(dim), P.zeros(dim))


@dataclass
class BlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MLPParams

    @classmethod
    def init(cls, rng, cfg: BackboneConfig) -> "BlockParams":
        L = cfg.embed_len
        return cls(
            LayerNormParams.init(L),
            AttentionParams.init(rng, L, cfg.heads),
            LayerNormParams.init(L),
            MLPParams.init(rng, L, cfg.mlp_hidden),
        )


@dataclass
class BackboneParams:
    w_patch: Tensor
    b_patch: Tensor
    pos: Tensor
    blocks: list[BlockParams]

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: BackboneConfig) -> "BackboneParams":
        fan_in = cfg.patch * cfg.patch * cfg.channels
        w, b = P.dense(rng, fan_in, cfg.embed_len)
        pos = Tensor(rng.normal(0.0, 0.5, size=(cfg.tokens, cfg.embed_len)), requires_grad=True)
        return cls(w, b, pos, [BlockParams.init(rng, cfg) for _ in range(cfg.blocks)])


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return ag.layer_norm(x, p.gamma, p.beta)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, patch*patch*C), tokens in row-major grid order."""
    *lead, H, W, C = images.shape
    if H % patch or W % patch:
        raise DimensionError(f"image extent {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    x = images.reshape(*lead, gh, patch, gw, patch, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, patch * patch * C)


def patch_embed(image, p: BackboneParams, cfg: BackboneConfig) -> Tensor:
    """Tokenize an image grid into a D x N x L token volume.

    ``image`` is (H, W, C), treated as depth 1, or (..., D, H, W, C) with any
    leading batch axes preserved.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.shape[-1] != cfg.channels:
        raise DimensionError(f"expected {cfg.channels} channels, got image shape {image.shape}")
    if image.shape[-3] != cfg.image_size or image.shape[-2] != cfg.image_size:
        if image.shape[-3] % cfg.patch or image.shape[-2] % cfg.patch:
            raise DimensionError(f"image extent {image.shape[-3:-1]} not divisible by patch {cfg.patch}")
        raise DimensionError(f"image extent {image.shape[-3:-1]} does not match configured {cfg.image_size}")
    tokens = Tensor(patchify(image, cfg.patch))
    return ag.linear(tokens, p.w_patch, p.b_patch) + p.pos


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, S, L = x.shape
    x = x.reshape(*lead, S, heads, L // heads)
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, S, dh = x.shape
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n, n + 2)
    return x.reshape(*lead, S, H * dh)


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: AttentionParams) -> Tensor:
    """Scaled dot-product attention with separate query / key / value sources."""
    L = p.wq.shape[0]
    if q_in.shape[-1] != L or k_in.shape[-1] != L or v_in.shape[-1] != L:
        raise DimensionError(
            f"attention: inputs {q_in.shape}, {k_in.shape}, {v_in.shape} do not match width {L}"
        )
    if k_in.shape[-2] != v_in.shape[-2]:
        raise DimensionError(f"attention: key length {k_in.shape} differs from value length {v_in.shape}")
    h = p.heads
    q = _split_heads(ag.linear(q_in, p.wq, p.bq), h)
    k = _split_heads(ag.linear(k_in, p.wk, p.bk), h)
    v = _split_heads(ag.linear(v_in, p.wv, p.bv), h)
    scores = ag.matmul(q, ag.swap_last(k)) * (1.0 / math.sqrt(L // h))
    out = ag.matmul(ag.softmax(scores, axis=-1), v)
    return ag.linear(_merge_heads(out), p.wo, p.bo)


def multi_head_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Global self-attention over axis -2; all leading axes are batch."""
    return attention(x, x, x, p)


def mlp(x: Tensor, p: MLPParams) -> Tensor:
    return ag.linear(ag.gelu(ag.linear(x, p.w1, p.b1)), p.w2, p.b2)


def vit_block(x: Tensor, p: BlockParams) -> Tensor:
    x = x + multi_head_attention(layer_norm(x, p.ln1), p.attn)
    return x + mlp(layer_norm(x, p.ln2), p.mlp)


def encode(image, p: BackboneParams, cfg: BackboneConfig) -> Tensor:
    x = patch_embed(image, p, cfg)
    for bp in p.blocks:
        x = vit_block(x, bp)
    return x
