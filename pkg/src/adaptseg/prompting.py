"""Simulated user prompts (clicks, boxes) and the sparse prompt encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import autograd as ag
from . import params as P
from .autograd import Tensor

MAX_BOX_TRIES = 1000
BOX_TOLERANCE = 0.05
POS, NEG, BOX_LO, BOX_HI, PAD = range(5)


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class Click:
    position: tuple[int, ...]
    label: int  # +1 foreground, -1 background

    def __post_init__(self):
        if self.label not in (1, -1):
            raise PromptError(f"click label must be +1 or -1, got {self.label}")


@dataclass(frozen=True)
class BBox:
    """Half-open box: voxels with lo[i] <= x[i] < hi[i]."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or any(a >= b for a, b in zip(self.lo, self.hi)):
            raise PromptError(f"degenerate box {self.lo} -> {self.hi}")

    @property
    def volume(self) -> int:
        return int(np.prod([b - a for a, b in zip(self.lo, self.hi)]))


@dataclass
class PromptSet:
    clicks: list[Click] = field(default_factory=list)
    box: BBox | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.clicks) + (2 if self.box is not None else 0)


def box_iou(a: BBox, b: BBox) -> float:
    inter = 1
    for alo, ahi, blo, bhi in zip(a.lo, a.hi, b.lo, b.hi):
        inter *= max(0, min(ahi, bhi) - max(alo, blo))
    return inter / (a.volume + b.volume - inter)


def tight_box(gt: np.ndarray) -> BBox:
    pts = np.argwhere(gt)
    if len(pts) == 0:
        raise PromptError("cannot box an empty mask")
    return BBox(tuple(int(v) for v in pts.min(0)), tuple(int(v) + 1 for v in pts.max(0)))


def sample_random_clicks(gt: np.ndarray, n_pos: int, n_neg: int, seed) -> list[Click]:
    """Uniform positive clicks on the foreground and negative clicks on the background."""
    gt = np.asarray(gt, dtype=bool)
    rng = np.random.default_rng(seed)
    clicks = []
    for n, region, label, name in ((n_pos, gt, 1, "foreground"), (n_neg, ~gt, -1, "background")):
        if n <= 0:
            continue
        pts = np.argwhere(region)
        if len(pts) == 0:
            raise PromptError(f"cannot sample {n} click(s): {name} is empty")
        pick = rng.choice(len(pts), size=n, replace=len(pts) < n)
        clicks += [Click(tuple(int(v) for v in pts[i]), label) for i in pick]
    return clicks


def _interior_point(component: np.ndarray) -> tuple[int, ...]:
    # pad so the grid border counts as boundary
    dist = ndimage.distance_transform_edt(np.pad(component, 1))
    dist = dist[tuple(slice(1, -1) for _ in range(component.ndim))]
    best = np.argwhere(dist == dist.max())[0]
    return tuple(int(v) for v in best)


def sample_iterative_click(pred: np.ndarray, gt: np.ndarray) -> Click | None:
    """Click the most interior voxel of the largest error component.

    False-negative and false-positive regions are labelled separately
    (face connectivity), so the returned label always corrects its voxel.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise PromptError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    structure = ndimage.generate_binary_structure(gt.ndim, 1)
    best = None
    for region, label in ((gt & ~pred, 1), (pred & ~gt, -1)):
        labels, n = ndimage.label(region, structure=structure)
        if n == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        k = int(np.argmax(sizes))
        if best is None or sizes[k] > best[0]:
            best = (int(sizes[k]), labels == k + 1, label)
    if best is None:
        return None
    return Click(_interior_point(best[1]), best[2])


def generate_bbox(gt: np.ndarray, overlap: float, seed) -> BBox:
    """Tight box for overlap 1; otherwise a jittered box whose IoU with the tight box is overlap +- 0.05."""
    if not 0 < overlap <= 1:
        raise PromptError(f"overlap must lie in (0, 1], got {overlap}")
    tight = tight_box(np.asarray(gt, dtype=bool))
    if overlap == 1:
        return tight
    extent = np.asarray(gt.shape)
    lo0, hi0 = np.asarray(tight.lo, float), np.asarray(tight.hi, float)
    size0 = hi0 - lo0
    centre0 = (lo0 + hi0) / 2
    rng = np.random.default_rng(seed)
    spread = 1.0 - overlap
    for _ in range(MAX_BOX_TRIES):
        size = size0 * np.exp(rng.uniform(-1.5, 1.5, size=len(extent)) * spread)
        centre = centre0 + rng.uniform(-1.0, 1.0, size=len(extent)) * spread * size0
        lo = np.clip(np.round(centre - size / 2), 0, extent - 1).astype(int)
        hi = np.clip(np.round(centre + size / 2), 1, extent).astype(int)
        hi = np.maximum(hi, lo + 1)
        box = BBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi))
        if abs(box_iou(box, tight) - overlap) <= BOX_TOLERANCE:
            return box
    raise PromptError(f"no box with IoU {overlap} +- {BOX_TOLERANCE} after {MAX_BOX_TRIES} draws")


# -- encoding ------------------------------------------------------------------


@dataclass
class PromptEncoderParams(P.Trainable):
    pos_click: Tensor
    neg_click: Tensor
    box_lo: Tensor
    box_hi: Tensor
    pad: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, embed_len: int) -> "PromptEncoderParams":
        def emb():
            return Tensor(rng.normal(0.0, 1.0, size=(embed_len,)), requires_grad=True)

        return cls(emb(), emb(), emb(), emb(), emb())


def sinusoidal_encoding(coords: np.ndarray, extent: Sequence[int], length: int) -> np.ndarray:
    """Fixed Fourier features of voxel-centre coordinates.

    ``coords`` is (..., ndim) in voxel units.  Each axis gets length // (2 ndim)
    geometrically spaced frequencies; leftover slots are zero.
    """
    coords = np.asarray(coords, dtype=np.float64)
    ndim = coords.shape[-1]
    k = length // (2 * ndim)
    u = (coords + 0.5) / np.asarray(extent, dtype=np.float64)
    freqs = np.pi * np.geomspace(1.0, 32.0, k) if k > 1 else np.array([np.pi] * k)
    ang = u[..., :, None] * freqs  # (..., ndim, k)
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(*coords.shape[:-1], 2 * k * ndim)
    out = np.zeros(coords.shape[:-1] + (length,))
    out[..., : feats.shape[-1]] = feats
    return out


def _box_corners(box: BBox) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(box.lo, float), np.asarray(box.hi, float) - 1.0


def _tokens(prompts: PromptSet) -> tuple[list[np.ndarray], list[int]]:
    coords, types = [], []
    for c in prompts.clicks:
        coords.append(np.asarray(c.position, float))
        types.append(POS if c.label == 1 else NEG)
    if prompts.box is not None:
        lo, hi = _box_corners(prompts.box)
        coords += [lo, hi]
        types += [BOX_LO, BOX_HI]
    if not coords:
        raise PromptError("prompt set has neither clicks nor a box")
    return coords, types


def encode_prompt_batch(
    batch: Sequence[PromptSet], p: PromptEncoderParams, extent: Sequence[int], n_tokens: int | None = None
) -> Tensor:
    """Encode prompt sets to (B, N_p, L): positional encoding plus a learned type embedding.

    Clicks come first in order, then the two box corners; shorter sets are
    right-padded with the learned padding embedding (zero positional part).
    """
    L = p.pos_click.shape[0]
    n = n_tokens if n_tokens is not None else max(ps.n_tokens for ps in batch)
    pe = np.zeros((len(batch), n, L))
    type_ids = np.full((len(batch), n), PAD)
    for b, ps in enumerate(batch):
        coords, types = _tokens(ps)
        if len(coords) > n:
            raise PromptError(f"prompt set has {len(coords)} tokens, more than {n}")
        pe[b, : len(coords)] = sinusoidal_encoding(np.stack(coords), extent, L)
        type_ids[b, : len(coords)] = types
    table = ag.stack([p.pos_click, p.neg_click, p.box_lo, p.box_hi, p.pad], axis=0)
    return Tensor(pe) + ag.index(table, type_ids)


def encode_prompts(prompts: PromptSet, p: PromptEncoderParams, extent: Sequence[int], n_tokens: int | None = None) -> Tensor:
    """Single prompt set -> (N_p, L)."""
    out = encode_prompt_batch([prompts], p, extent, n_tokens)
    return out.reshape(out.shape[1:])
