"""Closed-form parameter counts, derived from the configuration alone.

Nothing here builds tensors, so very large configurations can be audited
cheaply.  The counts must agree with the assembled model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import BackboneConfig
from .model import ModelConfig


def linear(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def attention(L: int) -> int:
    return 4 * linear(L, L)


def mlp(L: int, hidden: int) -> int:
    return linear(L, hidden) + linear(hidden, L)


def backbone(cfg: BackboneConfig) -> int:
    L = cfg.embed_len
    embed = linear(cfg.patch * cfg.patch * cfg.channels, L) + cfg.tokens * L
    block = 2 * (2 * L) + attention(L) + mlp(L, cfg.mlp_hidden)
    return embed + cfg.blocks * block


def decoder_block(L: int, hidden: int) -> int:
    return 3 * attention(L) + 4 * (2 * L) + mlp(L, hidden)


def prompt_encoder(L: int) -> int:
    return 5 * L


def mask_head(L: int) -> int:
    c1, c2 = max(L // 4, 1), max(L // 8, 1)
    up = L + L * 4 * c1 + c1 + c1 * 4 * c2 + c2
    return up + linear(L, L) + linear(L, L) + linear(L, c2)


def adapter(L: int, h: int) -> int:
    return linear(L, h) + linear(h, L)


def prompt_cond(mode: str, L: int, h: int, layers: int = 3) -> int:
    if mode == "none":
        return 0
    n = linear(L, h)
    if mode == "concat":
        n += linear(2 * h, h)
    elif mode == "hyper":
        n += layers * linear(h, h * h)
    return n


@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int

    @property
    def frozen(self) -> int:
        return self.total - self.trainable

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


FROZEN_GROUPS = ("backbone", "neck", "decoder")


def breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Per-group counts; the adapter rows are zero when adapters are off."""
    bb = cfg.backbone
    L, Ld = bb.embed_len, cfg.dec_len
    h, hd = cfg.adapter_config.hidden, cfg.decoder_adapter_config.hidden
    on = int(cfg.adapters)
    return {
        "backbone": backbone(bb),
        "neck": linear(L, Ld) if cfg.has_neck else 0,
        "decoder": cfg.decoder_blocks * decoder_block(Ld, cfg.decoder_mlp_hidden),
        "prompt_encoder": prompt_encoder(Ld),
        "mask_head": mask_head(Ld),
        "encoder_adapters": on * 2 * bb.blocks * adapter(L, h),
        "decoder_adapters": on * cfg.decoder_blocks * 3 * adapter(Ld, hd),
        "prompt_conditioning": on * cfg.decoder_blocks * prompt_cond(cfg.mode, Ld, hd),
    }


def count(cfg: ModelConfig) -> ParamCount:
    groups = breakdown(cfg)
    total = sum(groups.values())
    if not cfg.adapters:
        return ParamCount(total, 0)
    return ParamCount(total, total - sum(groups[g] for g in FROZEN_GROUPS))


def vit_h_config(reduction: int = 16, mode: str = "hyper") -> ModelConfig:
    """ViT-H/16 dimensions at 1024 px with a 256-wide, 2-block decoder behind a neck."""
    bb = BackboneConfig(image_size=1024, patch=16, channels=3, embed_len=1280, heads=16, blocks=32, mlp_ratio=4.0)
    return ModelConfig(bb, reduction=reduction, mode=mode, decoder_len=256)
