"""Randomized finite-difference suites covering every differentiable op in the package.

Each suite draws fresh shapes and values per case, reduces the op's output to
a scalar through a fixed random projection, and checks a few sampled
coordinates across the input and all parameters.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import params as P
from .adapters import AdapterConfig, AdapterParams, adapter_branch, adapter_forward, encoder_block_adapted
from .autograd import Tensor
from .backbone import AttentionParams, BackboneConfig, BackboneParams, BlockParams, MLPParams, attention, mlp, patch_embed, vit_block
from .decoder import DecoderAdapters, DecoderBlockParams, DecoderState, MaskHeadParams, mask_logits, two_way_block_adapted
from .gradcheck import finite_diff_check
from .hyp_adpt import PromptCondParams, apply_hyper_prompt, generate_weights, init_hyper_layers, prompt_condition
from .prompting import BBox, Click, PromptEncoderParams, PromptSet, encode_prompt_batch
from .sd_trans import depth_branch, space_branch, sd_trans_block

Case = tuple[Callable[..., Tensor], list[Tensor]]


def _t(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def _randomize(obj, rng, scale=0.5) -> list[Tensor]:
    """Overwrite every tensor in a parameter tree with N(0, scale^2) and return them."""
    tensors = [t for _, t in P.named_tensors(obj)]
    for t in tensors:
        t.data = rng.normal(0.0, scale, size=t.shape)
    return tensors


def _projected(fn: Callable[[], Tensor], rng) -> Callable[..., Tensor]:
    """Scalar sum(fn() * R) with a fixed random R, so every output entry matters."""
    weight: list[np.ndarray] = []
    seed = int(rng.integers(2**32))

    def f(*_):
        y = fn()
        if not weight:
            weight.append(np.random.default_rng(seed).normal(size=y.shape))
        return ag.sum_(y * Tensor(weight[0]))

    return f


def _shape(rng, ndim_lo=1, ndim_hi=3, lo=1, hi=4) -> tuple[int, ...]:
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=int(rng.integers(ndim_lo, ndim_hi + 1))))


def _unary(op, domain="real"):
    def make(rng) -> Case:
        x = rng.normal(size=_shape(rng))
        if domain == "positive":
            x = np.abs(x) + 0.5
        elif domain == "nonzero":
            x = np.sign(x + 1e-12) * (np.abs(x) + 0.5)
        elif domain == "wide":
            x = x * 4
        t = _t(x)
        return _projected(lambda: op(t), rng), [t]

    return make


def _binary(op, broadcast=True, nonzero_b=False):
    def make(rng) -> Case:
        shape = _shape(rng)
        b_shape = shape
        if broadcast and rng.random() < 0.5:
            b_shape = tuple(1 if rng.random() < 0.5 else n for n in shape)[int(rng.integers(0, len(shape))) :]
        a = _t(rng.normal(size=shape))
        bv = rng.normal(size=b_shape)
        if nonzero_b:
            bv = np.sign(bv + 1e-12) * (np.abs(bv) + 0.5)
        b = _t(bv)
        return _projected(lambda: op(a, b), rng), [a, b]

    return make


def _reduce(op):
    def make(rng) -> Case:
        shape = _shape(rng, 1, 3)
        x = _t(rng.normal(size=shape))
        choice = rng.integers(0, 3)
        axis = None if choice == 0 else int(rng.integers(-len(shape), len(shape)))
        keep = bool(rng.integers(0, 2))
        return _projected(lambda: op(x, axis=axis, keepdims=keep), rng), [x]

    return make


def _reshape(rng) -> Case:
    shape = _shape(rng, 2, 3)
    x = _t(rng.normal(size=shape))
    target = (-1,) if rng.random() < 0.3 else (int(np.prod(shape)),) if rng.random() < 0.5 else (shape[0], -1)
    return _projected(lambda: ag.reshape(x, target), rng), [x]


def _transpose(rng) -> Case:
    shape = _shape(rng, 2, 4)
    x = _t(rng.normal(size=shape))
    perm = tuple(int(i) for i in rng.permutation(len(shape)))
    return _projected(lambda: ag.transpose_axes(x, perm), rng), [x]


def _swap_last(rng) -> Case:
    x = _t(rng.normal(size=_shape(rng, 2, 4)))
    return _projected(lambda: ag.swap_last(x), rng), [x]


def _index(rng) -> Case:
    shape = _shape(rng, 1, 3, 2, 5)
    x = _t(rng.normal(size=shape))
    kind = rng.integers(0, 3)
    if kind == 0:
        idx = slice(int(rng.integers(0, shape[0])), None)
    elif kind == 1:
        idx = (Ellipsis, int(rng.integers(0, shape[-1])))
    else:
        idx = rng.integers(0, shape[0], size=int(rng.integers(1, 6)))  # repeats exercise accumulation
    return _projected(lambda: ag.index(x, idx), rng), [x]


def _concat(rng) -> Case:
    shape = list(_shape(rng, 1, 3))
    axis = int(rng.integers(0, len(shape)))
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        s = list(shape)
        s[axis] = int(rng.integers(1, 4))
        parts.append(_t(rng.normal(size=s)))
    return _projected(lambda: ag.concat(parts, axis=axis), rng), parts


def _stack(rng) -> Case:
    shape = _shape(rng, 1, 2)
    parts = [_t(rng.normal(size=shape)) for _ in range(int(rng.integers(2, 4)))]
    axis = int(rng.integers(0, len(shape) + 1))
    return _projected(lambda: ag.stack(parts, axis=axis), rng), parts


def _broadcast(rng) -> Case:
    shape = _shape(rng, 1, 3)
    src = tuple(1 if rng.random() < 0.5 else n for n in shape)
    x = _t(rng.normal(size=src))
    target = (int(rng.integers(1, 3)),) + shape
    return _projected(lambda: ag.broadcast_to(x, target), rng), [x]


def _matmul(rng) -> Case:
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    batch = _shape(rng, 0, 2)
    a = _t(rng.normal(size=batch + (m, k)))
    b_batch = batch if rng.random() < 0.5 else ()
    b = _t(rng.normal(size=b_batch + (k, n)))
    return _projected(lambda: ag.matmul(a, b), rng), [a, b]


def _linear(rng) -> Case:
    k, n = (int(v) for v in rng.integers(1, 5, size=2))
    x = _t(rng.normal(size=_shape(rng, 1, 2) + (k,)))
    w, b = _t(rng.normal(size=(k, n))), _t(rng.normal(size=(n,)))
    return _projected(lambda: ag.linear(x, w, b), rng), [x, w, b]


def _softmax(rng) -> Case:
    shape = _shape(rng, 1, 3, 2, 5)
    x = _t(rng.normal(size=shape) * 2)
    axis = int(rng.integers(-len(shape), len(shape)))
    return _projected(lambda: ag.softmax(x, axis=axis), rng), [x]


def _standardize(rng) -> Case:
    x = _t(rng.normal(size=_shape(rng, 1, 2) + (int(rng.integers(2, 6)),)))
    return _projected(lambda: ag.standardize(x, axis=-1), rng), [x]


def _layer_norm(rng) -> Case:
    L = int(rng.integers(2, 6))
    x = _t(rng.normal(size=_shape(rng, 1, 2) + (L,)))
    g, b = _t(rng.normal(size=L)), _t(rng.normal(size=L))
    return _projected(lambda: ag.layer_norm(x, g, b), rng), [x, g, b]


# -- model-level suites -------------------------------------------------------------------


def _dims(rng) -> tuple[int, int]:
    heads = int(rng.choice([1, 2]))
    return heads * int(rng.choice([2, 4])), heads


def _patch_embed(rng) -> Case:
    patch = int(rng.choice([1, 2]))
    cfg = BackboneConfig(image_size=2 * patch * int(rng.integers(1, 3)), patch=patch, channels=int(rng.integers(1, 3)), embed_len=4, heads=1, blocks=1)
    p = BackboneParams.init(rng, cfg)
    p.blocks = []
    img = rng.normal(size=(int(rng.integers(1, 3)), cfg.image_size, cfg.image_size, cfg.channels))
    return _projected(lambda: patch_embed(img, p, cfg), rng), _randomize(p, rng)


def _attention(rng) -> Case:
    L, heads = _dims(rng)
    p = AttentionParams.init(rng, L, heads)
    q = _t(rng.normal(size=(int(rng.integers(1, 4)), L)))
    kv = _t(rng.normal(size=(int(rng.integers(1, 5)), L)))
    return _projected(lambda: attention(q, kv, kv, p), rng), [q, kv] + _randomize(p, rng)


def _mlp(rng) -> Case:
    L = int(rng.integers(2, 6))
    p = MLPParams.init(rng, L, 2 * L)
    x = _t(rng.normal(size=(int(rng.integers(1, 4)), L)))
    return _projected(lambda: mlp(x, p), rng), [x] + _randomize(p, rng)


def _vit_block(rng) -> Case:
    L, heads = _dims(rng)
    cfg = BackboneConfig(image_size=2, patch=1, embed_len=L, heads=heads, blocks=1, mlp_ratio=2.0)
    p = BlockParams.init(rng, cfg)
    x = _t(rng.normal(size=(int(rng.integers(1, 4)), L)))
    return _projected(lambda: vit_block(x, p), rng), [x] + _randomize(p, rng)


def _adapter(fn):
    def make(rng) -> Case:
        L = int(rng.choice([4, 8]))
        p = AdapterParams.init(rng, AdapterConfig(L, int(rng.choice([2, 4]))))
        x = _t(rng.normal(size=_shape(rng, 1, 2) + (L,)))
        return _projected(lambda: fn(x, p), rng), [x] + _randomize(p, rng)

    return make


def _encoder_block(sd: bool):
    def make(rng) -> Case:
        L, heads = _dims(rng)
        bcfg = BackboneConfig(image_size=2, patch=1, embed_len=L, heads=heads, blocks=1, mlp_ratio=2.0)
        acfg = AdapterConfig(L, 2, float(rng.uniform(0.1, 1.0)))
        block = BlockParams.init(rng, bcfg)
        a1, a2 = AdapterParams.init(rng, acfg), AdapterParams.init(rng, acfg)
        shape = (int(rng.integers(2, 4)), int(rng.integers(2, 4)), L) if sd else (int(rng.integers(1, 4)), L)
        x = _t(rng.normal(size=shape))
        tensors = [x] + _randomize([block, a1, a2], rng)
        return _projected(lambda: encoder_block_adapted(x, block, a1, a2, acfg, sd_trans=sd), rng), tensors

    return make


def _sd(fn):
    def make(rng) -> Case:
        L, heads = _dims(rng)
        p = AttentionParams.init(rng, L, heads)
        x = _t(rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 4)), L)))
        return _projected(lambda: fn(x, p), rng), [x] + _randomize(p, rng)

    return make


def _generate_weights(rng) -> Case:
    lp, lin = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    widths = [(lin, int(rng.integers(1, 4)))]
    widths.append((widths[-1][1], int(rng.integers(1, 4))))
    layers = init_hyper_layers(rng, lp, widths)
    e = _t(rng.normal(size=(int(rng.integers(1, 3)), lp)))
    tensors = [e] + [t for l in layers for t in (l.w, l.b)]

    def fn():
        return ag.concat([m.reshape(-1) for m in generate_weights(e, layers)], axis=0)

    return _projected(fn, rng), tensors


def _apply_hyper(rng) -> Case:
    T, lin = int(rng.integers(1, 4)), int(rng.integers(2, 4))
    widths = [lin] + [int(rng.integers(2, 4)) for _ in range(int(rng.integers(1, 4)))]
    shared = bool(rng.integers(0, 2))
    e = _t(rng.normal(size=(T, lin)))
    maps = [_t(rng.normal(size=(1 if shared else T, a, b))) for a, b in zip(widths, widths[1:])]
    return _projected(lambda: apply_hyper_prompt(e, maps), rng), [e] + maps


def _prompt_condition(mode: str):
    def make(rng) -> Case:
        L, h = 4, int(rng.choice([2, 3]))
        p = PromptCondParams.init(rng, mode, L, h)
        e_down = _t(rng.normal(size=(int(rng.integers(1, 4)), h)))
        e_prompt = _t(rng.normal(size=(int(rng.integers(1, 4)), L)))
        return _projected(lambda: prompt_condition(e_down, e_prompt, p), rng), [e_down, e_prompt] + _randomize(p, rng)

    return make


def _decoder_block(rng) -> Case:
    L, heads = _dims(rng)
    mode = str(rng.choice(["none", "add", "concat", "hyper"]))
    target = str(rng.choice(["image", "prompt"]))
    acfg = AdapterConfig(L, 2)
    blk = DecoderBlockParams.init(rng, L, heads, 2 * L)
    ad = DecoderAdapters(
        AdapterParams.init(rng, acfg),
        PromptCondParams.init(rng, mode, L, acfg.hidden),
        AdapterParams.init(rng, acfg),
        AdapterParams.init(rng, acfg),
    )
    B, n_p, N = 1, int(rng.integers(1, 3)), int(rng.integers(2, 5))
    q, k = _t(rng.normal(size=(B, n_p + 1, L))), _t(rng.normal(size=(B, N, L)))
    prompt = _t(rng.normal(size=(B, n_p, L)))
    qpe, kpe = Tensor(rng.normal(size=q.shape)), Tensor(rng.normal(size=k.shape))

    def fn():
        s = two_way_block_adapted(DecoderState(q, k, qpe, kpe, prompt), blk, ad, mode, 0.5, target)
        return ag.concat([s.queries.reshape(-1), s.keys.reshape(-1)], axis=0)

    return _projected(fn, rng), [q, k, prompt] + _randomize([blk, ad], rng)


def _mask_logits(rng) -> Case:
    L, grid = 8, int(rng.integers(1, 3))
    head = MaskHeadParams.init(rng, L)
    out = int(rng.choice([4 * grid, 4 * grid + 2, 6 * grid]))
    q = _t(rng.normal(size=(1, 2, L)))
    k = _t(rng.normal(size=(1, grid * grid, L)))
    state = DecoderState(q, k, q, k, q)
    return _projected(lambda: mask_logits(state, head, grid, out), rng), [q, k] + _randomize(head, rng)


def _encode_prompts(rng) -> Case:
    L = 8
    p = PromptEncoderParams.init(rng, L)
    batch = []
    for _ in range(int(rng.integers(1, 3))):
        clicks = [Click(tuple(int(v) for v in rng.integers(0, 8, 2)), int(rng.choice([-1, 1]))) for _ in range(int(rng.integers(0, 3)))]
        lo = rng.integers(0, 4, 2)
        box = BBox(tuple(int(v) for v in lo), tuple(int(v) for v in lo + rng.integers(1, 4, 2))) if rng.random() < 0.5 or not clicks else None
        batch.append(PromptSet(clicks, box))
    return _projected(lambda: encode_prompt_batch(batch, p, (8, 8)), rng), _randomize(p, rng)


def _seg_loss(rng) -> Case:
    from .train import segmentation_loss

    logits = _t(rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 3)), 4, 4)) * 2)
    target = rng.random(logits.shape) < 0.4
    w = rng.uniform(0, 1, size=2)
    return (lambda *_: segmentation_loss(logits, target, w[0], w[1])), [logits]


SUITES: dict[str, dict[str, Callable[[np.random.Generator], Case]]] = {
    "tensor": {
        "add": _binary(lambda a, b: a + b),
        "sub": _binary(lambda a, b: a - b),
        "mul": _binary(lambda a, b: a * b),
        "div": _binary(lambda a, b: a / b, nonzero_b=True),
        "neg": _unary(lambda x: ag.neg(x)),
        "reciprocal": _unary(lambda x: ag.reciprocal(x), "nonzero"),
        "exp": _unary(lambda x: ag.exp(x)),
        "log": _unary(lambda x: ag.log(x), "positive"),
        "sqrt": _unary(lambda x: ag.sqrt(x), "positive"),
        "square": _unary(lambda x: ag.square(x)),
        "tanh": _unary(lambda x: ag.tanh(x)),
        "sigmoid": _unary(lambda x: ag.sigmoid(x), "wide"),
        "softplus": _unary(lambda x: ag.softplus(x), "wide"),
        "relu": _unary(lambda x: ag.relu(x)),
        "gelu": _unary(lambda x: ag.gelu(x), "wide"),
        "sum": _reduce(lambda x, **kw: ag.sum_(x, **kw)),
        "mean": _reduce(lambda x, **kw: ag.mean(x, **kw)),
        "reshape": _reshape,
        "transpose": _transpose,
        "swap_last": _swap_last,
        "index": _index,
        "concat": _concat,
        "stack": _stack,
        "broadcast_to": _broadcast,
        "matmul": _matmul,
        "linear": _linear,
        "softmax": _softmax,
        "standardize": _standardize,
        "layer_norm": _layer_norm,
    },
    "vit": {
        "patch_embed": _patch_embed,
        "attention": _attention,
        "mlp": _mlp,
        "vit_block": _vit_block,
    },
    "adapter": {
        "adapter_branch": _adapter(adapter_branch),
        "adapter_forward": _adapter(adapter_forward),
        "encoder_block_adapted": _encoder_block(False),
    },
    "sd_trans": {
        "space_branch": _sd(space_branch),
        "depth_branch": _sd(depth_branch),
        "sd_trans_block": _sd(sd_trans_block),
        "encoder_block_sd_trans": _encoder_block(True),
    },
    "hyp_adpt": {
        "generate_weights": _generate_weights,
        "apply_hyper_prompt": _apply_hyper,
        "prompt_condition_add": _prompt_condition("add"),
        "prompt_condition_concat": _prompt_condition("concat"),
        "prompt_condition_hyper": _prompt_condition("hyper"),
    },
    "decoder": {
        "decoder_block": _decoder_block,
        "mask_logits": _mask_logits,
        "prompt_encoder": _encode_prompts,
        "segmentation_loss": _seg_loss,
    },
}


def op_names() -> list[str]:
    return [name for ops in SUITES.values() for name in ops]


@dataclass
class OpResult:
    suite: str
    op: str
    cases: int
    coords: int
    kinks: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.coords > 0 and self.max_rel_err < TOL

    def row(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return d


TOL = 1e-4
H = 1e-5


def run_op(suite: str, op: str, cases: int = 100, seed: int = 0, coords_per_case: int = 4) -> OpResult:
    make = SUITES[suite][op]
    rng = np.random.default_rng([seed, sum(op.encode())])
    start = time.perf_counter()
    n_coords = kinks = 0
    worst = 0.0
    for _ in range(cases):
        f, inputs = make(rng)
        rep = finite_diff_check(f, inputs, h=H, tol=TOL, max_coords=coords_per_case, rng=rng)
        n_coords += len(rep.coords)
        kinks += rep.kinks
        worst = max(worst, rep.max_rel_err)
    return OpResult(suite, op, cases, n_coords, kinks, worst, time.perf_counter() - start)


def run_all(cases: int = 100, seed: int = 0, only: list[str] | None = None, coords_per_case: int = 4) -> list[OpResult]:
    results = []
    for suite, ops in SUITES.items():
        for op in ops:
            if only and op not in only and suite not in only:
                continue
            results.append(run_op(suite, op, cases, seed, coords_per_case))
    return results
