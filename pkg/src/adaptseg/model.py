"""Assembly of the promptable segmentation model with its adaptation sites."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import params as P
from .adapters import AdapterConfig, AdapterParams, encoder_block_adapted
from .autograd import Tensor
from .backbone import BackboneConfig, BackboneParams, patch_embed
from .decoder import (
    DecoderAdapters,
    DecoderBlockParams,
    MaskHeadParams,
    init_state,
    mask_logits,
    two_way_block_adapted,
)
from .hyp_adpt import PromptCondParams, check_mode
from .prompting import PromptEncoderParams, PromptSet, encode_prompt_batch, sinusoidal_encoding


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    reduction: int = 4
    scale: float = 0.5
    adapters: bool = True
    mode: str = "hyper"
    sd_trans: bool = False
    decoder_blocks: int = 2
    cond_target: str = "image"
    decoder_len: int | None = None

    def __post_init__(self):
        check_mode(self.mode)
        if self.dec_len < 1 or self.dec_len % self.backbone.heads:
            raise ValueError(f"decoder width {self.dec_len} not divisible by heads {self.backbone.heads}")
        if self.decoder_blocks < 1:
            raise ValueError("decoder_blocks must be positive")
        if self.cond_target not in ("image", "prompt"):
            raise ValueError(f"cond_target must be 'image' or 'prompt', got {self.cond_target!r}")
        self.adapter_config  # validates reduction
        self.decoder_adapter_config

    @property
    def dec_len(self) -> int:
        """Token width inside the decoder; a frozen linear neck maps encoder tokens to it."""
        return self.decoder_len or self.backbone.embed_len

    @property
    def has_neck(self) -> bool:
        return self.dec_len != self.backbone.embed_len

    @property
    def decoder_mlp_hidden(self) -> int:
        return int(round(self.dec_len * self.backbone.mlp_ratio))

    @property
    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(self.backbone.embed_len, self.reduction, self.scale)

    @property
    def decoder_adapter_config(self) -> AdapterConfig:
        return AdapterConfig(self.dec_len, self.reduction, self.scale)

    @property
    def is_volume(self) -> bool:
        return self.backbone.depth > 1


@dataclass
class EncoderAdapters:
    a1: AdapterParams
    a2: AdapterParams


@dataclass
class ModelParams:
    backbone: BackboneParams
    decoder: list[DecoderBlockParams]
    prompt_encoder: PromptEncoderParams
    mask_head: MaskHeadParams
    enc_adapters: list[EncoderAdapters]
    dec_adapters: list[DecoderAdapters]
    neck: tuple[Tensor, Tensor] | None = None


def _rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Each parameter group draws from its own stream, so toggling adapters or
    the conditioning mode never perturbs the frozen weights."""
    bb = cfg.backbone
    L = cfg.dec_len
    r_bb, r_dec, r_prompt, r_head, r_enc_ad, r_dec_ad, r_cond, r_neck = _rngs(seed, 8)
    backbone = BackboneParams.init(r_bb, bb)
    neck = P.dense(r_neck, bb.embed_len, L) if cfg.has_neck else None
    decoder = [DecoderBlockParams.init(r_dec, L, bb.heads, cfg.decoder_mlp_hidden) for _ in range(cfg.decoder_blocks)]
    prompt_encoder = PromptEncoderParams.init(r_prompt, L)
    head = MaskHeadParams.init(r_head, L)
    enc_ad, dec_ad = [], []
    if cfg.adapters:
        acfg = cfg.adapter_config
        enc_ad = [EncoderAdapters(AdapterParams.init(r_enc_ad, acfg), AdapterParams.init(r_enc_ad, acfg)) for _ in range(bb.blocks)]
        acfg = cfg.decoder_adapter_config
        for _ in range(cfg.decoder_blocks):
            a1 = AdapterParams.init(r_dec_ad, acfg)
            a2 = AdapterParams.init(r_dec_ad, acfg)
            a3 = AdapterParams.init(r_dec_ad, acfg)
            cond = PromptCondParams.init(r_cond, cfg.mode, L, acfg.hidden)
            dec_ad.append(DecoderAdapters(a1, cond, a2, a3))
    return ModelParams(backbone, decoder, prompt_encoder, head, enc_ad, dec_ad, neck)


class SegModel:
    """Frozen encoder/decoder plus trainable adaptation parameters."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: ModelParams | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self._pe_cache: dict = {}

    # -- parameter bookkeeping ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return P.named_tensors(self.params)

    def freeze_mask(self) -> dict[str, bool]:
        flags = P.trainable_flags(self.params)
        if not self.cfg.adapters:
            return {k: False for k in flags}
        return flags

    def trainable_parameters(self) -> list[Tensor]:
        mask = self.freeze_mask()
        return [t for name, t in self.named_parameters() if mask[name]]

    def set_grad_for_training(self) -> None:
        """Only trainable tensors require grad, so frozen weights cost nothing in backward."""
        mask = self.freeze_mask()
        for name, t in self.named_parameters():
            t.requires_grad = mask[name]

    def set_grad_all(self) -> None:
        for _, t in self.named_parameters():
            t.requires_grad = True

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    # -- forward -------------------------------------------------------------------

    @property
    def spatial_extent(self) -> tuple[int, ...]:
        bb = self.cfg.backbone
        if self.cfg.is_volume:
            return (bb.depth, bb.image_size, bb.image_size)
        return (bb.image_size, bb.image_size)

    def image_pe(self, depth: int) -> np.ndarray:
        """Positional encoding of token centres, (depth, N, L), in the prompt coordinate frame."""
        if depth in self._pe_cache:
            return self._pe_cache[depth]
        bb = self.cfg.backbone
        g, p = bb.grid, bb.patch
        centre = np.arange(g) * p + (p - 1) / 2
        rows, cols = np.meshgrid(centre, centre, indexing="ij")
        rc = np.stack([rows.ravel(), cols.ravel()], axis=-1)
        if self.cfg.is_volume:
            coords = np.stack(
                [np.concatenate([np.full((len(rc), 1), d), rc], axis=-1) for d in range(depth)]
            )
        else:
            coords = rc[None]
        pe = sinusoidal_encoding(coords, self.spatial_extent, self.cfg.dec_len)
        self._pe_cache[depth] = pe
        return pe

    def encode_image(self, images: np.ndarray) -> Tensor:
        cfg, prm = self.cfg, self.params
        x = patch_embed(images, prm.backbone, cfg.backbone)
        acfg = cfg.adapter_config
        for i, block in enumerate(prm.backbone.blocks):
            ad = prm.enc_adapters[i] if prm.enc_adapters else None
            x = encoder_block_adapted(
                x, block, ad.a1 if ad else None, ad.a2 if ad else None, acfg, sd_trans=cfg.sd_trans
            )
        return x

    def forward(self, images: np.ndarray, prompts: Sequence[PromptSet]) -> Tensor:
        """Mask logits (B, D, H, W) for images (B, D, H, W, C) and one prompt set per image."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 5:
            raise ag.DimensionError(f"expected images (B, D, H, W, C), got {images.shape}")
        B, D = images.shape[:2]
        if len(prompts) != B:
            raise ValueError(f"{len(prompts)} prompt sets for {B} images")
        cfg, prm = self.cfg, self.params
        bb = cfg.backbone
        L = cfg.dec_len

        tokens = self.encode_image(images).reshape(B * D, bb.tokens, bb.embed_len)
        if prm.neck is not None:
            tokens = ag.linear(tokens, *prm.neck)
        prompt = encode_prompt_batch(prompts, prm.prompt_encoder, self.spatial_extent)
        if D > 1:
            n_p = prompt.shape[1]
            prompt = ag.broadcast_to(prompt.reshape(B, 1, n_p, L), (B, D, n_p, L)).reshape(B * D, n_p, L)
        pe = np.broadcast_to(self.image_pe(D)[None], (B, D, bb.tokens, L)).reshape(B * D, bb.tokens, L)

        state = init_state(tokens, prompt, pe, prm.mask_head)
        for i, block in enumerate(prm.decoder):
            ad = prm.dec_adapters[i] if prm.dec_adapters else None
            state = two_way_block_adapted(state, block, ad, cfg.mode, cfg.scale, cfg.cond_target)
        logits = mask_logits(state, prm.mask_head, bb.grid, bb.image_size)
        return logits.reshape(B, D, bb.image_size, bb.image_size)

    def predict(self, images: np.ndarray, prompts: Sequence[PromptSet]) -> np.ndarray:
        """Foreground probabilities as a plain array, no graph."""
        with ag.no_grad():
            return ag.sigmoid(self.forward(images, prompts)).data
