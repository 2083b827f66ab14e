"""Prompt-conditioned adaptation: hyper-generated weight maps and the add/concat baselines.

The prompt embedding is projected, one small linear map per layer, into a
flat vector that is reshaped into an L_in x L_out weight map.  The adapter's
reduced embedding is pushed through the maps in sequence, each step being
matmul -> per-token standardization -> ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import params as P
from .autograd import DimensionError, Tensor

MODES = ("none", "add", "concat", "hyper")
NORM_EPS = 1e-5


@dataclass
class HyperLayerParams:
    w: Tensor  # (L_p, L_in * L_out)
    b: Tensor  # (L_in * L_out,)
    l_in: int
    l_out: int


@dataclass
class PromptCondParams(P.Trainable):
    mode: str
    reduce_w: Tensor | None = None  # prompt tokens (L) -> L_p
    reduce_b: Tensor | None = None
    concat_w: Tensor | None = None
    concat_b: Tensor | None = None
    hyper: list[HyperLayerParams] = field(default_factory=list)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        mode: str,
        embed_len: int,
        down_len: int,
        widths: Sequence[tuple[int, int]] | None = None,
    ) -> "PromptCondParams":
        """Parameters for one conditioning site.

        The prompt tokens are reduced from ``embed_len`` to ``down_len`` so
        the add arm lines up with the adapter bottleneck.
        """
        check_mode(mode)
        p = cls(mode)
        if mode == "none":
            return p
        p.reduce_w, p.reduce_b = P.dense(rng, embed_len, down_len)
        if mode == "concat":
            p.concat_w, p.concat_b = P.dense(rng, 2 * down_len, down_len)
        elif mode == "hyper":
            widths = widths or default_widths(down_len)
            check_widths(widths, down_len)
            p.hyper = init_hyper_layers(rng, down_len, widths)
        return p


def check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown prompt-condition mode {mode!r}; expected one of {MODES}")


def default_widths(down_len: int, layers: int = 3) -> list[tuple[int, int]]:
    return [(down_len, down_len)] * layers


def check_widths(widths: Sequence[tuple[int, int]], l_in: int | None = None) -> None:
    if not widths:
        raise DimensionError("hyper-prompting needs at least one layer")
    if l_in is not None and widths[0][0] != l_in:
        raise DimensionError(f"first layer input width {widths[0][0]} != reduced embedding length {l_in}")
    for (a_in, a_out), (b_in, _) in zip(widths, widths[1:]):
        if a_out != b_in:
            raise DimensionError(f"width chain breaks: {a_in}->{a_out} followed by {b_in}->...")


def init_hyper_layers(rng, prompt_len: int, widths) -> list[HyperLayerParams]:
    layers = []
    for l_in, l_out in widths:
        # scaled so a generated map has O(1/sqrt(l_in)) entries
        w = P.uniform(rng, (prompt_len, l_in * l_out), 1.0 / np.sqrt(prompt_len * l_in))
        b = P.uniform(rng, (l_in * l_out,), 1.0 / np.sqrt(l_in))
        layers.append(HyperLayerParams(w, b, l_in, l_out))
    return layers


def generate_weights(e_prompt: Tensor, layers: Sequence[HyperLayerParams]) -> list[Tensor]:
    """Project each prompt token to a flat vector and reshape it to (..., N_p, L_in, L_out)."""
    check_widths([(l.l_in, l.l_out) for l in layers])
    maps = []
    for layer in layers:
        if e_prompt.shape[-1] != layer.w.shape[0]:
            raise DimensionError(f"prompt length {e_prompt.shape[-1]} != projection input {layer.w.shape[0]}")
        flat = ag.linear(e_prompt, layer.w, layer.b)
        maps.append(flat.reshape(*e_prompt.shape[:-1], layer.l_in, layer.l_out))
    return maps


def apply_hyper_prompt(e_down: Tensor, maps: Sequence[Tensor]) -> Tensor:
    """e <- ReLU(standardize(e @ w_i)) for each map, per token.

    ``e_down`` is (..., T, L_in).  Each map is (..., T, L_in, L_out) for
    token-aligned weights, or (..., 1, L_in, L_out) to share one map across
    all T tokens.
    """
    e = e_down
    for w in maps:
        if w.ndim < 3 or e.shape[-1] != w.shape[-2]:
            raise DimensionError(f"cannot apply weight map {w.shape} to embedding {e.shape}")
        if w.shape[-3] == 1:
            w2 = w.reshape(*w.shape[:-3], w.shape[-2], w.shape[-1])
            y = ag.matmul(e, w2)
        else:
            if w.shape[-3] != e.shape[-2]:
                raise DimensionError(f"token count of map {w.shape} does not match embedding {e.shape}")
            y = ag.matmul(e.reshape(*e.shape[:-1], 1, e.shape[-1]), w)
            y = y.reshape(*e.shape[:-1], w.shape[-1])
        e = ag.relu(ag.standardize(y, axis=-1, eps=NORM_EPS))
    return e


def reduce_prompt(e_prompt: Tensor, p: PromptCondParams) -> Tensor:
    """Linear reduction followed by a mean over prompt tokens: (..., N_p, L) -> (..., 1, L_p)."""
    reduced = ag.linear(e_prompt, p.reduce_w, p.reduce_b)
    return ag.mean(reduced, axis=-2, keepdims=True)


def prompt_condition(e_down: Tensor, e_prompt: Tensor, p: PromptCondParams, mode: str | None = None) -> Tensor:
    """Condition the adapter bottleneck ``e_down`` (..., T, L_down) on prompt tokens (..., N_p, L).

    The hyper path already ends in ReLU; the other modes return
    pre-activation values and the caller applies the adapter's ReLU.
    """
    mode = p.mode if mode is None else mode
    check_mode(mode)
    if mode == "none":
        return e_down
    pooled = reduce_prompt(e_prompt, p)
    if mode == "add":
        if pooled.shape[-1] != e_down.shape[-1]:
            raise DimensionError(f"add: reduced prompt {pooled.shape} vs embedding {e_down.shape}")
        return e_down + pooled
    if mode == "concat":
        tiled = ag.broadcast_to(pooled, e_down.shape[:-1] + (pooled.shape[-1],))
        return ag.linear(ag.concat([e_down, tiled], axis=-1), p.concat_w, p.concat_b)
    return apply_hyper_prompt(e_down, generate_weights(pooled, p.hyper))
