"""Bottleneck adapters and their placement inside frozen encoder blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import params as P
from .autograd import DimensionError, Tensor
from .backbone import BlockParams, layer_norm, mlp, multi_head_attention
from .sd_trans import sd_trans_block


@dataclass
class AdapterConfig:
    embed_len: int = 64
    reduction: int = 4
    scale: float = 0.5

    def __post_init__(self):
        if self.reduction < 1 or self.embed_len % self.reduction:
            raise ValueError(f"embed_len {self.embed_len} not divisible by reduction {self.reduction}")
        if self.scale < 0:
            raise ValueError("scale must be non-negative")

    @property
    def hidden(self) -> int:
        return self.embed_len // self.reduction


@dataclass
class AdapterParams(P.Trainable):
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: AdapterConfig) -> "AdapterParams":
        L, h = cfg.embed_len, cfg.hidden
        bound = 1.0 / np.sqrt(L)
        return cls(P.uniform(rng, (L, h), bound), P.uniform(rng, (h,), bound), P.zeros((h, L)), P.zeros((L,)))


def _check(e: Tensor, p: AdapterParams) -> None:
    if e.shape[-1] != p.w_down.shape[0]:
        raise DimensionError(f"adapter expects last axis {p.w_down.shape[0]}, got {e.shape}")


def down(e: Tensor, p: AdapterParams) -> Tensor:
    _check(e, p)
    return ag.linear(e, p.w_down, p.b_down)


def up(h: Tensor, p: AdapterParams) -> Tensor:
    return ag.linear(h, p.w_up, p.b_up)


def adapter_branch(e: Tensor, p: AdapterParams) -> Tensor:
    """up(ReLU(down(e))) with no skip; the parallel form."""
    return up(ag.relu(down(e, p)), p)


def adapter_forward(e: Tensor, p: AdapterParams) -> Tensor:
    """Serial adapter with an internal skip, so zero up-projection is the identity."""
    return e + adapter_branch(e, p)


def sd_or_plain_attention(h: Tensor, block: BlockParams, sd_trans: bool) -> Tensor:
    if sd_trans:
        return sd_trans_block(h, block.attn)
    return multi_head_attention(h, block.attn)


def encoder_block_adapted(
    x: Tensor,
    block: BlockParams,
    a1: AdapterParams | None,
    a2: AdapterParams | None,
    cfg: AdapterConfig,
    sd_trans: bool = False,
) -> Tensor:
    """Pre-norm ViT block with the two encoder adapters.

    a1 wraps the attention output before the residual add; a2 runs in
    parallel with the MLP and its output is scaled by ``cfg.scale``.
    """
    a = sd_or_plain_attention(layer_norm(x, block.ln1), block, sd_trans)
    if a1 is not None:
        a = adapter_forward(a, a1)
    x = x + a
    h = layer_norm(x, block.ln2)
    m = mlp(h, block.mlp)
    if a2 is not None:
        m = m + adapter_branch(h, a2) * cfg.scale
    return x + m


def freeze_mask(model) -> dict[str, bool]:
    """Parameter name -> trainable.

    True exactly for tensors held (at any depth) by a trainable group:
    adapters, prompt conditioning, prompt-encoder embeddings and the mask head.
    """
    if hasattr(model, "freeze_mask"):
        return model.freeze_mask()
    return P.trainable_flags(model)
