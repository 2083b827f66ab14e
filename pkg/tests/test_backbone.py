import numpy as np
import pytest

from adaptseg import params_count
from adaptseg.autograd import DimensionError, Tensor
from adaptseg.backbone import (
    AttentionParams,
    BackboneConfig,
    BackboneParams,
    BlockParams,
    encode,
    multi_head_attention,
    patch_embed,
    patchify,
    vit_block,
)
from adaptseg import params as P


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_patch_embed_2d_shape(rng):
    cfg = BackboneConfig(image_size=32, patch=8, embed_len=16, heads=2)
    p = BackboneParams.init(rng, cfg)
    assert patch_embed(rng.random((32, 32, 1)), p, cfg).shape == (1, 16, 16)


def test_patch_embed_volume_shape(rng):
    cfg = BackboneConfig(image_size=32, depth=4, patch=8, embed_len=16, heads=2)
    p = BackboneParams.init(rng, cfg)
    assert patch_embed(rng.random((4, 32, 32, 1)), p, cfg).shape == (4, 16, 16)


def test_zero_image_gives_positional_embedding(rng):
    cfg = BackboneConfig(image_size=16, patch=4, embed_len=8, heads=2)
    p = BackboneParams.init(rng, cfg)
    p.b_patch.data[:] = 0
    out = patch_embed(np.zeros((16, 16, 1)), p, cfg)
    assert np.array_equal(out.data[0], p.pos.data)


def test_patch_embed_indivisible_extent(rng):
    cfg = BackboneConfig(image_size=16, patch=4, embed_len=8, heads=2)
    p = BackboneParams.init(rng, cfg)
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((18, 18, 1)), p, cfg)
    with pytest.raises(ValueError):
        BackboneConfig(image_size=18, patch=4)


def test_patchify_row_major_order():
    img = np.arange(16.0).reshape(4, 4, 1)
    tokens = patchify(img, 2)
    assert tokens[0].tolist() == [0, 1, 4, 5]
    assert tokens[1].tolist() == [2, 3, 6, 7]
    assert tokens[2].tolist() == [8, 9, 12, 13]


def test_single_token_attention_is_value_path(rng):
    p = AttentionParams.init(rng, 8, 2)
    x = rng.normal(size=(1, 8))
    out = multi_head_attention(Tensor(x), p).data
    expected = (x @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_identical_tokens_give_identical_outputs(rng):
    p = AttentionParams.init(rng, 8, 4)
    x = np.tile(rng.normal(size=(1, 8)), (5, 1))
    out = multi_head_attention(Tensor(x), p).data
    assert np.allclose(out, out[0], rtol=0, atol=1e-14)


def test_attention_matches_loop_oracle(rng):
    L, heads, S = 8, 2, 5
    p = AttentionParams.init(rng, L, heads)
    x = rng.normal(size=(S, L))
    q, k, v = (x @ w.data + b.data for w, b in ((p.wq, p.bq), (p.wk, p.bk), (p.wv, p.bv)))
    dh = L // heads
    merged = np.zeros((S, L))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(S):
            logits = np.array([q[i, sl] @ k[j, sl] for j in range(S)]) / np.sqrt(dh)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            merged[i, sl] = sum(w[j] * v[j, sl] for j in range(S))
    expected = merged @ p.wo.data + p.bo.data
    np.testing.assert_allclose(multi_head_attention(Tensor(x), p).data, expected, rtol=1e-12, atol=1e-14)


def test_vit_block_identity_with_zero_output_weights(rng):
    cfg = BackboneConfig(image_size=8, patch=4, embed_len=8, heads=2)
    p = BlockParams.init(rng, cfg)
    for t in (p.attn.wo, p.attn.bo, p.mlp.w2, p.mlp.b2):
        t.data[:] = 0
    x = rng.normal(size=(4, 8))
    assert np.array_equal(vit_block(Tensor(x), p).data, x)


def test_permutation_equivariance(rng):
    cfg = BackboneConfig(image_size=8, patch=4, embed_len=8, heads=2)
    p = BlockParams.init(rng, cfg)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    a = vit_block(Tensor(x), p).data[perm]
    b = vit_block(Tensor(x[perm]), p).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_attention_shape_mismatch(rng):
    p = AttentionParams.init(rng, 8, 2)
    with pytest.raises(DimensionError):
        multi_head_attention(Tensor(np.zeros((3, 6))), p)


def test_parameter_count_matches_formula(rng):
    for cfg in (BackboneConfig(), BackboneConfig(image_size=32, patch=4, embed_len=24, heads=3, blocks=2, mlp_ratio=2.5)):
        assert P.count(BackboneParams.init(rng, cfg)) == params_count.backbone(cfg)


def test_encode_deterministic_per_seed():
    cfg = BackboneConfig(image_size=16, patch=4, embed_len=8, heads=2, blocks=2)
    img = np.random.default_rng(5).random((16, 16, 1))
    a = encode(img, BackboneParams.init(np.random.default_rng(1), cfg), cfg).data
    b = encode(img, BackboneParams.init(np.random.default_rng(1), cfg), cfg).data
    assert np.array_equal(a, b)


def test_desk_defaults():
    cfg = BackboneConfig()
    assert (cfg.image_size, cfg.patch, cfg.embed_len, cfg.heads, cfg.blocks, cfg.mlp_ratio) == (64, 8, 64, 4, 4, 4.0)
