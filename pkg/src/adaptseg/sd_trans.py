"""Space-depth transpose attention for token volumes shaped (..., D, N, L)."""

from __future__ import annotations

from .autograd import DimensionError, Tensor, transpose_axes
from .backbone import AttentionParams, multi_head_attention


def _swap_depth_tokens(x: Tensor) -> Tensor:
    if x.ndim < 3:
        raise DimensionError(f"expected (..., D, N, L), got {x.shape}")
    perm = list(range(x.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return transpose_axes(x, perm)


def space_branch(x: Tensor, p: AttentionParams) -> Tensor:
    """Attention over the N tokens of each depth slice independently."""
    if x.ndim < 3:
        raise DimensionError(f"expected (..., D, N, L), got {x.shape}")
    return multi_head_attention(x, p)


def depth_branch(x: Tensor, p: AttentionParams) -> Tensor:
    """Attention over depth at each token position, sharing ``p`` with the space branch."""
    return _swap_depth_tokens(multi_head_attention(_swap_depth_tokens(x), p))


def sd_trans_block(x: Tensor, p: AttentionParams) -> Tensor:
    return space_branch(x, p) + depth_branch(x, p)
