"""Dataset handling: splits, resizing, augmentation, synthetic scenes and mask folders."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from faslseg.data import (
    AugmentPolicy,
    SegmentationSample,
    SplitSpec,
    augment,
    class_shapes,
    crop_and_resize,
    hflip,
    load_class_names,
    load_mask_dir,
    resize_for_model,
    resize_mask,
    restore_prediction,
    sample_crop,
    sample_rng,
    save_mask_dir,
    split_samples,
    synth_dataset,
    vflip,
)
from faslseg.errors import ContractError, DataError


def _sample(h=4, w=6, sid="s", rng=None):
    rng = rng or np.random.default_rng(0)
    return SegmentationSample(rng.random((3, h, w)), rng.integers(0, 3, (h, w)), (h, w), sid)


def test_sample_alignment_is_checked():
    with pytest.raises(ContractError):
        SegmentationSample(np.zeros((3, 4, 4)), np.zeros((4, 5), int), (4, 4), "x")


# -- splits / rng -----------------------------------------------------------------


def test_split_is_deterministic_and_order_free():
    samples = [_sample(sid=f"id{i}") for i in range(10)]
    a = split_samples(samples, SplitSpec(0.8, 42))
    b = split_samples(samples[::-1], SplitSpec(0.8, 42))
    assert [s.id for s in a[0]] == [s.id for s in b[0]]
    assert len(a[0]) == 8 and len(a[1]) == 2
    assert not {s.id for s in a[0]} & {s.id for s in a[1]}


def test_sample_rng_depends_on_id_and_epoch():
    draw = lambda sid, ep: sample_rng(0, sid, ep).random()  # noqa: E731
    assert draw("a", 1) == draw("a", 1)
    assert draw("a", 1) != draw("b", 1)
    assert draw("a", 1) != draw("a", 2)


# -- resizing ---------------------------------------------------------------------


def test_resize_already_at_size_is_unchanged():
    s = _sample(8, 8)
    assert resize_for_model(s, 8) is s


def test_resize_large_frame_records_original_size():
    s = SegmentationSample(np.zeros((3, 1024, 1280)), np.zeros((1024, 1280), int), (1024, 1280), "frame")
    r = resize_for_model(s, 512)
    assert r.image.shape == (3, 512, 512) and r.mask.shape == (512, 512)
    assert r.original_size == (1024, 1280)


def test_resize_constant_image_stays_constant():
    s = SegmentationSample(np.full((3, 10, 14), 0.3), np.zeros((10, 14), int), (10, 14), "c")
    np.testing.assert_allclose(resize_for_model(s, 16).image, 0.3, atol=1e-15)


def test_restore_identity_and_block_replication():
    m = np.array([[0, 1], [2, 3]])
    assert restore_prediction(m, (2, 2)) is m
    expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    np.testing.assert_array_equal(restore_prediction(m, (4, 4)), expected)


def test_restore_rejects_empty_size():
    with pytest.raises(ContractError):
        restore_prediction(np.zeros((2, 2), int), (0, 3))


@pytest.mark.parametrize("factor", [2, 4])
def test_down_up_round_trip_keeps_uniform_blocks(factor):
    coarse = np.random.default_rng(3).integers(0, 4, (4, 4))
    fine = np.kron(coarse, np.ones((factor, factor), int))
    down = resize_mask(fine, 4, 4)
    np.testing.assert_array_equal(down, coarse)
    np.testing.assert_array_equal(restore_prediction(down, fine.shape), fine)


# -- augmentation -----------------------------------------------------------------


def test_no_augmentation_is_identity():
    s = _sample()
    out = augment(s, np.random.default_rng(0), AugmentPolicy.none())
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_flip_probability_zero_is_identity():
    s = _sample()
    out = augment(s, np.random.default_rng(0), AugmentPolicy(resized_crop=False, flip_prob=0.0))
    np.testing.assert_array_equal(out.mask, s.mask)


def test_flips_are_involutions():
    s = _sample()
    np.testing.assert_array_equal(hflip(hflip(s)).image, s.image)
    np.testing.assert_array_equal(vflip(vflip(s)).mask, s.mask)


def test_vflip_moves_top_row_to_bottom():
    mask = np.zeros((4, 3), int)
    mask[0] = 2
    s = SegmentationSample(np.zeros((3, 4, 3)), mask, (4, 3), "v")
    out = vflip(s).mask
    assert (out[-1] == 2).all() and (out[:-1] == 0).all()


def test_hflip_moves_image_and_mask_together():
    s = _sample()
    out = hflip(s)
    np.testing.assert_array_equal(out.image[:, :, 0], s.image[:, :, -1])
    np.testing.assert_array_equal(out.mask[:, 0], s.mask[:, -1])


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 40), st.integers(4, 40), st.integers(0, 2**31 - 1))
def test_sample_crop_in_bounds(h, w, seed):
    top, left, ch, cw = sample_crop(np.random.default_rng(seed), h, w, AugmentPolicy())
    assert 0 <= top and 0 <= left and ch >= 1 and cw >= 1
    assert top + ch <= h and left + cw <= w


def test_crop_keeps_extent_and_labels():
    s = _sample(8, 8)
    out = crop_and_resize(s, 2, 1, 4, 5)
    assert out.size == (8, 8)
    assert set(np.unique(out.mask)) <= set(np.unique(s.mask[2:6, 1:6]))


def test_augment_is_reproducible():
    s = _sample(16, 16)
    a = augment(s, sample_rng(1, s.id, 3), AugmentPolicy())
    b = augment(s, sample_rng(1, s.id, 3), AugmentPolicy())
    np.testing.assert_array_equal(a.image, b.image)


# -- synthetic scenes ----------------------------------------------------------------


def test_synthetic_is_deterministic():
    a, b = synth_dataset(3, 32, 4, seed=9), synth_dataset(3, 32, 4, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.mask, y.mask)
    assert not np.array_equal(a[0].image, synth_dataset(1, 32, 4, seed=10)[0].image)


def test_single_rectangle_area():
    for s in synth_dataset(5, 32, 2, seed=1):
        (shape,) = s.meta["shapes"]
        assert shape["kind"] == "rectangle"
        assert (s.mask == 1).sum() == shape["height"] * shape["width"]


def test_thin_class_is_small_and_last():
    assert class_shapes(4) == ["rectangle", "ellipse", "thin"]
    for s in synth_dataset(8, 64, 4, seed=0):
        frac = (s.mask == 3).mean()
        assert 0 < frac < 0.02


def test_synthetic_value_ranges():
    s = synth_dataset(1, 32, 5, seed=2)[0]
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert s.mask.max() < 5 and s.image.shape == (3, 32, 32)


def test_synthetic_needs_two_classes():
    with pytest.raises(ContractError):
        synth_dataset(1, 32, 1)


# -- mask folders ---------------------------------------------------------------------


def test_mask_dir_round_trip(tmp_path):
    samples = synth_dataset(3, 32, 4, seed=0)
    save_mask_dir(samples, tmp_path)
    loaded = load_mask_dir(tmp_path, 4)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.image, b.image, atol=1 / 255)
        assert b.original_size == (32, 32)


def test_missing_masks_directory(tmp_path):
    (tmp_path / "images").mkdir()
    with pytest.raises(DataError, match="masks"):
        load_mask_dir(tmp_path, 4)


def test_missing_mask_file(tmp_path):
    save_mask_dir(synth_dataset(2, 32, 3), tmp_path)
    (tmp_path / "masks" / "synth_00001.png").unlink()
    with pytest.raises(DataError, match="synth_00001"):
        load_mask_dir(tmp_path, 3)


def test_mask_value_above_class_count(tmp_path):
    save_mask_dir(synth_dataset(1, 32, 4), tmp_path)
    with pytest.raises(DataError, match="num_classes 3"):
        load_mask_dir(tmp_path, 3)


def test_colour_mask_rejected(tmp_path):
    save_mask_dir(synth_dataset(1, 32, 3), tmp_path)
    Image.new("RGB", (32, 32)).save(tmp_path / "masks" / "synth_00000.png")
    with pytest.raises(DataError, match="single-channel"):
        load_mask_dir(tmp_path, 3)


def test_class_names_file(tmp_path):
    path = tmp_path / "classes.txt"
    path.write_text("# index\tname\n0\tbackground\n1\tinstrument shaft\n")
    assert load_class_names(path) == {0: "background", 1: "instrument shaft"}
    path.write_text("zero background\n")
    with pytest.raises(DataError):
        load_class_names(path)
