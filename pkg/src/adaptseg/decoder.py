"""Two-way cross-attention mask decoder with three adapters per block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import params as P
from .adapters import AdapterParams, adapter_branch, adapter_forward, down, up
from .autograd import Tensor
from .backbone import AttentionParams, LayerNormParams, MLPParams, attention, layer_norm, mlp
from .hyp_adpt import PromptCondParams, prompt_condition


@dataclass
class DecoderBlockParams:
    self_attn: AttentionParams
    ln1: LayerNormParams
    t2i_attn: AttentionParams
    ln2: LayerNormParams
    mlp: MLPParams
    ln3: LayerNormParams
    i2t_attn: AttentionParams
    ln4: LayerNormParams

    @classmethod
    def init(cls, rng, dim: int, heads: int, mlp_hidden: int) -> "DecoderBlockParams":
        return cls(
            AttentionParams.init(rng, dim, heads),
            LayerNormParams.init(dim),
            AttentionParams.init(rng, dim, heads),
            LayerNormParams.init(dim),
            MLPParams.init(rng, dim, mlp_hidden),
            LayerNormParams.init(dim),
            AttentionParams.init(rng, dim, heads),
            LayerNormParams.init(dim),
        )


@dataclass
class DecoderAdapters:
    """The three adapters of one decoder block; ``cond`` drives the first one."""

    a1: AdapterParams
    cond: PromptCondParams
    a2: AdapterParams
    a3: AdapterParams


@dataclass
class MaskHeadParams(P.Trainable):
    output_token: Tensor  # (L,)
    up1_w: Tensor  # (L, 4 * c1)
    up1_b: Tensor
    up2_w: Tensor  # (c1, 4 * c2)
    up2_b: Tensor
    hyper_mlp: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, rng, dim: int) -> "MaskHeadParams":
        c1, c2 = max(dim // 4, 1), max(dim // 8, 1)
        up1_w, _ = P.dense(rng, dim, 4 * c1)
        up2_w, _ = P.dense(rng, c1, 4 * c2)
        widths = [dim, dim, dim, c2]
        layers = [P.dense(rng, a, b) for a, b in zip(widths, widths[1:])]
        return cls(
            Tensor(rng.normal(0.0, 1.0, size=(dim,)), requires_grad=True),
            up1_w,
            P.zeros((c1,)),
            up2_w,
            P.zeros((c2,)),
            layers,
        )

    @property
    def channels(self) -> int:
        return self.up2_b.shape[0]


@dataclass
class DecoderState:
    """Token sequences flowing through the decoder.

    ``queries`` is (B, 1 + N_p, L) with the output token at index 0;
    ``keys`` holds the image tokens (B, N, L).  The positional parts are
    re-added before every attention, and ``prompt`` keeps the raw encoded
    prompt tokens for prompt conditioning.
    """

    queries: Tensor
    keys: Tensor
    query_pe: Tensor
    key_pe: Tensor
    prompt: Tensor


def init_state(image_tokens: Tensor, prompt_tokens: Tensor, image_pe: np.ndarray, head: MaskHeadParams) -> DecoderState:
    B, _, L = prompt_tokens.shape
    out_tok = ag.broadcast_to(head.output_token.reshape(1, 1, L), (B, 1, L))
    queries = ag.concat([out_tok, prompt_tokens], axis=1)
    return DecoderState(queries, image_tokens, queries, Tensor(image_pe), prompt_tokens)


def _hyp_adapter(x: Tensor, e_prompt: Tensor, a: AdapterParams, cond: PromptCondParams, mode: str) -> Tensor:
    c = prompt_condition(down(x, a), e_prompt, cond, mode)
    if mode != "hyper":
        c = ag.relu(c)
    return x + up(c, a)


def two_way_block_adapted(
    state: DecoderState,
    p: DecoderBlockParams,
    adapters: DecoderAdapters | None = None,
    mode: str = "none",
    scale: float = 0.5,
    cond_target: str = "image",
) -> DecoderState:
    """One decoder block.

    (i) prompt self-attention; (ii) prompt-to-image cross-attention, then the
    prompt-conditioned first adapter on ``cond_target`` tokens; (iii) token MLP
    with the scaled parallel second adapter; (iv) image-to-prompt
    cross-attention, the third adapter after its residual, then layer norm.
    """
    q, k = state.queries, state.keys
    qpe, kpe = state.query_pe, state.key_pe

    qp = q + qpe
    q = layer_norm(q + attention(qp, qp, q, p.self_attn), p.ln1)

    q = layer_norm(q + attention(q + qpe, k + kpe, k, p.t2i_attn), p.ln2)
    if adapters is not None:
        if cond_target == "image":
            k = _hyp_adapter(k, state.prompt, adapters.a1, adapters.cond, mode)
        elif cond_target == "prompt":
            q = _hyp_adapter(q, state.prompt, adapters.a1, adapters.cond, mode)
        else:
            raise ValueError(f"cond_target must be 'image' or 'prompt', got {cond_target!r}")

    m = mlp(q, p.mlp)
    if adapters is not None:
        m = m + adapter_branch(q, adapters.a2) * scale
    q = layer_norm(q + m, p.ln3)

    r = k + attention(k + kpe, q + qpe, q, p.i2t_attn)
    if adapters is not None:
        r = adapter_forward(r, adapters.a3)
    k = layer_norm(r, p.ln4)
    return DecoderState(q, k, qpe, kpe, state.prompt)


def _conv_transpose2x2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-2, kernel-2 transposed convolution on (B, h, w, Cin) -> (B, 2h, 2w, Cout)."""
    B, h, wd, _ = x.shape
    c_out = b.shape[0]
    y = ag.matmul(x, w).reshape(B, h, wd, 2, 2, c_out)
    y = y.transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * h, 2 * wd, c_out)
    return y + b


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def mask_logits(state: DecoderState, head: MaskHeadParams, grid: int, out_size: int) -> Tensor:
    """Dynamic linear classifier over upsampled image tokens -> (B, out_size, out_size) logits."""
    B, N, L = state.keys.shape
    x = state.keys.reshape(B, grid, grid, L)
    x = ag.gelu(_conv_transpose2x2(x, head.up1_w, head.up1_b))
    x = ag.gelu(_conv_transpose2x2(x, head.up2_w, head.up2_b))  # (B, 4g, 4g, C)

    t = state.queries[:, 0, :]
    layers = head.hyper_mlp
    for i, (w, b) in enumerate(layers):
        t = ag.linear(t, w, b)
        if i < len(layers) - 1:
            t = ag.relu(t)
    side = 4 * grid
    logits = ag.matmul(x.reshape(B, side * side, head.channels), t.reshape(B, head.channels, 1))
    logits = logits.reshape(B, side, side)
    if side != out_size:
        U = bilinear_matrix(side, out_size)
        logits = ag.matmul(ag.matmul(Tensor(U), logits), Tensor(U.T.copy()))
    return logits


def decode_mask(state: DecoderState, head: MaskHeadParams, grid: int, out_size: int) -> Tensor:
    """Per-pixel foreground probability in [0, 1]."""
    return ag.sigmoid(mask_logits(state, head, grid, out_size))
