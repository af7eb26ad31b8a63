import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncauq.data import (CORRUPTION_KINDS, corrupt, generate_synthetic, load_dataset,
                        load_png_pairs, save_dataset, split)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_generator_is_deterministic():
    a = generate_synthetic(5, (32, 32), seed=7)
    b = generate_synthetic(5, (32, 32), seed=7)
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.mask, sb.mask)
        assert sa.id == sb.id


def test_generator_masks_nonempty_and_not_full():
    dataset = generate_synthetic(30, (32, 32), seed=1)
    for sample in dataset.samples:
        assert sample.mask.any()
        assert not sample.mask.all()
        assert sample.mask.dtype == bool
        assert sample.image.dtype == np.float32
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0


def test_generator_foreground_fraction_bounds():
    dataset = generate_synthetic(200, (32, 32), seed=2)
    fracs = [s.mask.mean() for s in dataset.samples]
    assert min(fracs) >= 0.05
    assert max(fracs) <= 0.6


def test_generator_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_synthetic(0, (32, 32), 0)
    with pytest.raises(ValueError):
        generate_synthetic(2, (8, 8), 0)


def test_generator_independent_of_n():
    # sample i only depends on (seed, i), not on how many samples were asked for
    small = generate_synthetic(2, (32, 32), seed=3)
    large = generate_synthetic(5, (32, 32), seed=3)
    assert np.array_equal(small.samples[1].image, large.samples[1].image)


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sample():
    return generate_synthetic(1, (32, 32), seed=4).samples[0]


def test_severity_zero_is_identity(sample):
    for kind in CORRUPTION_KINDS:
        out = corrupt(sample, kind, 0, seed=0)
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.mask, sample.mask)
        assert out.id == sample.id


def test_rotation_180_twice_recovers_original(sample):
    once = corrupt(sample, "rotation", 5, seed=0)   # severity 5 is 180 degrees
    twice = corrupt(once, "rotation", 5, seed=0)
    assert np.array_equal(twice.image, sample.image)
    assert np.array_equal(twice.mask, sample.mask)


def test_photometric_kinds_keep_mask(sample):
    for kind in ("gaussian_noise", "blur", "brightness", "contrast", "occlusion"):
        out = corrupt(sample, kind, 3, seed=5)
        assert np.array_equal(out.mask, sample.mask)
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        assert out.corruption == (kind, 3)


def test_geometric_kinds_warp_mask_jointly(sample):
    for kind in ("rotation", "scale"):
        out = corrupt(sample, kind, 3, seed=6)
        assert out.mask.dtype == bool
        assert out.mask.shape == sample.mask.shape
        assert not np.array_equal(out.mask, sample.mask)


def test_corrupt_is_deterministic(sample):
    a = corrupt(sample, "gaussian_noise", 4, seed=9)
    b = corrupt(sample, "gaussian_noise", 4, seed=9)
    assert np.array_equal(a.image, b.image)


def test_corrupt_unknown_kind(sample):
    with pytest.raises(ValueError):
        corrupt(sample, "sharpen", 2, seed=0)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def test_split_sizes_80_10_10():
    dataset = split(generate_synthetic(10, (16, 16), 0), (0.8, 0.1, 0.1), seed=0)
    assert len(dataset.splits["train"]) == 8
    assert len(dataset.splits["val"]) == 1
    assert len(dataset.splits["test"]) == 1


def test_split_same_seed_identical():
    base = generate_synthetic(20, (16, 16), 0)
    a = split(base, (0.7, 0.15, 0.15), seed=3)
    b = split(base, (0.7, 0.15, 0.15), seed=3)
    assert a.splits == b.splits


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 60), st.integers(0, 2**31 - 1))
def test_split_partitions_all_indices(n, seed):
    base = generate_synthetic(1, (16, 16), 0)
    base.samples.extend(base.samples[0] for _ in range(n - 1))
    dataset = split(base, (0.7, 0.15, 0.15), seed=seed)
    indices = sorted(i for idx in dataset.splits.values() for i in idx)
    assert indices == list(range(n))  # disjoint and covering


def test_split_rejects_empty_parts_and_bad_ratios():
    base = generate_synthetic(3, (16, 16), 0)
    with pytest.raises(ValueError):
        split(base, (0.9, 0.05, 0.05), seed=0)
    with pytest.raises(ValueError):
        split(base, (0.5, 0.2, 0.2), seed=0)


# ---------------------------------------------------------------------------
# PNG + manifest round trips
# ---------------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path):
    dataset = split(generate_synthetic(6, (16, 16), 8), (0.5, 0.25, 0.25), 8)
    save_dataset(dataset, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == 6
    assert loaded.splits == dataset.splits
    for orig, back in zip(dataset.samples, loaded.samples):
        assert np.array_equal(orig.mask, back.mask)        # masks exactly
        assert np.abs(orig.image - back.image).max() <= (1.0 / 255.0)  # 8-bit quantization
        assert orig.id == back.id


def test_manifest_records_corruption(tmp_path):
    base = generate_synthetic(2, (16, 16), 9)
    base.samples[1] = corrupt(base.samples[1], "blur", 2, seed=0)
    save_dataset(base, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.samples[1].corruption == ("blur", 2)
    assert loaded.samples[0].corruption is None


def test_load_png_pairs_lexicographic(tmp_path):
    dataset = generate_synthetic(3, (16, 16), 10)
    save_dataset(dataset, tmp_path)
    pairs = load_png_pairs(tmp_path / "images", tmp_path / "masks")
    assert [s.id for s in pairs.samples] == sorted(s.id for s in dataset.samples)


def test_load_png_pairs_empty_dir_errors(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with pytest.raises(FileNotFoundError):
        load_png_pairs(tmp_path / "images", tmp_path / "masks")


def test_load_png_pairs_missing_mask_names_file(tmp_path):
    dataset = generate_synthetic(1, (16, 16), 11)
    save_dataset(dataset, tmp_path)
    (tmp_path / "masks" / "synth-00000.png").unlink()
    with pytest.raises(FileNotFoundError, match="synth-00000"):
        load_png_pairs(tmp_path / "images", tmp_path / "masks")


def test_load_png_pairs_resize(tmp_path):
    dataset = generate_synthetic(1, (24, 24), 12)
    save_dataset(dataset, tmp_path)
    pairs = load_png_pairs(tmp_path / "images", tmp_path / "masks", resize_to=(16, 16))
    assert pairs.samples[0].image.shape == (16, 16, 3)
    assert pairs.samples[0].mask.shape == (16, 16)
    pairs = load_png_pairs(tmp_path / "images", tmp_path / "masks", resize_to=(32, 32))
    assert pairs.samples[0].image.shape == (32, 32, 3)
