import numpy as np
import pytest

from adaptseg.synthetic import (
    SyntheticSpec,
    gen_dataset,
    make_sample,
    rasterize,
    read_dataset,
    read_manifest,
    split,
    write_dataset,
)


SMALL = dict(image_size=32, min_radius=3.0, max_radius=6.0)


@pytest.mark.parametrize("kind,depth", [("single", 1), ("multi", 1), ("pair", 1), ("drift3d", 6)])
def test_deterministic_nonempty_in_range(kind, depth):
    spec = SyntheticSpec(kind=kind, depth=depth, count=12, seed=3, **SMALL)
    a, b = gen_dataset(spec), gen_dataset(spec)
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image) and np.array_equal(s.mask, t.mask)
        assert s.mask.any()
        assert s.image.shape == (depth, 32, 32, 1) and s.mask.shape == (depth, 32, 32)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_different_seed_differs():
    a = make_sample(SyntheticSpec(seed=0), 0)
    b = make_sample(SyntheticSpec(seed=1), 0)
    assert not np.array_equal(a.image, b.image)


@pytest.mark.parametrize("kind,depth", [("multi", 1), ("pair", 1), ("drift3d", 5)])
def test_mask_rerasterizes_from_recorded_parameters(kind, depth):
    spec = SyntheticSpec(kind=kind, depth=depth, count=10, **SMALL)
    for s in gen_dataset(spec):
        np.testing.assert_array_equal(rasterize(s.objects[s.target], 32, depth), s.mask)


def test_low_contrast_gap():
    spec = SyntheticSpec(kind="single", low_contrast=True, noise=0.0, count=4)
    assert spec.gap == 0.1
    for s in gen_dataset(spec):
        fg, bg = s.image[..., 0][s.mask], s.image[..., 0][~s.mask]
        assert abs(fg.mean() - bg.mean() - 0.1) < 1e-6


def test_split_half():
    train, test = split(list(range(10)), 0.5, seed=0)
    assert len(train) == len(test) == 5
    assert sorted(train + test) == list(range(10))
    assert split(list(range(10)), 0.5, seed=0) == (train, test)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2, 0.01])
def test_split_degenerate(fraction):
    with pytest.raises(ValueError):
        split(list(range(10)), fraction, seed=0)


def test_pair_that_cannot_fit_errors():
    with pytest.raises(ValueError, match="cannot fit"):
        make_sample(SyntheticSpec(kind="pair", image_size=32), 0)


def test_bad_spec():
    with pytest.raises(ValueError):
        SyntheticSpec(kind="torus")
    with pytest.raises(ValueError):
        SyntheticSpec(count=0)
    with pytest.raises(ValueError):
        SyntheticSpec(kind="drift3d", depth=1)


def test_file_roundtrip(tmp_path):
    spec = SyntheticSpec(kind="drift3d", depth=8, count=5, **SMALL)
    samples = gen_dataset(spec)
    write_dataset(tmp_path, samples, spec)
    back = read_dataset(tmp_path)
    assert len(back) == 5
    for s, t in zip(samples, back):
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.mask, t.mask)
        assert s.objects == t.objects and s.target == t.target
    for rec in read_manifest(tmp_path)["samples"]:
        assert rec["mask_bytes"] == -(-8 * 32 * 32 // 8)
        assert rec["image_bytes"] == 8 * 32 * 32 * 4
    assert (tmp_path / "masks.bin").stat().st_size == 5 * 1024


def test_mask_padding_to_whole_bytes(tmp_path):
    spec = SyntheticSpec(kind="single", image_size=9, count=2, min_radius=1.0, max_radius=2.0)
    write_dataset(tmp_path, gen_dataset(spec), spec)
    assert [r["mask_bytes"] for r in read_manifest(tmp_path)["samples"]] == [11, 11]
    for s, t in zip(gen_dataset(spec), read_dataset(tmp_path)):
        np.testing.assert_array_equal(s.mask, t.mask)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)
