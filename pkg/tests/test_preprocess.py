from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hand.preprocess import (
    CANONICAL_SIZE,
    PairingError,
    PreprocessError,
    RawImageRecord,
    crop_tissue,
    dedupe_latest,
    maybe_invert,
    minmax,
    normalize_minmax,
    preprocess_records,
    prune_intensity_outliers,
    stitch_pair,
)

T0 = datetime(2023, 1, 1, 9, 0, 0)


def rec(image_id, study="s1", lat="Left", view="MLO", dt=0, inverted=False, pixels=None):
    if pixels is None:
        pixels = np.ones((20, 20))
    return RawImageRecord(image_id, pixels, lat, view, study, T0 + timedelta(minutes=dt), inverted)


# ------------------------------------------------------------ dedupe


def test_dedupe_keeps_latest_of_duplicates():
    out = dedupe_latest([rec("a", dt=1), rec("b", dt=5)])
    assert [r.image_id for r in out] == ["b"]


def test_dedupe_latest_first_in_order():
    out = dedupe_latest([rec("late", dt=9), rec("early", dt=2)])
    assert [r.image_id for r in out] == ["late"]


def test_dedupe_single_record_unchanged():
    r = rec("a")
    assert dedupe_latest([r]) == [r]


def test_dedupe_distinct_keys_preserve_order():
    rs = [rec("a", lat="Right"), rec("b", study="s2"), rec("c", view="CC")]
    assert [r.image_id for r in dedupe_latest(rs)] == ["a", "b", "c"]


def test_dedupe_empty():
    assert dedupe_latest([]) == []


key_strategy = st.tuples(
    st.sampled_from(["s1", "s2", "s3"]),
    st.sampled_from(["Left", "Right"]),
    st.sampled_from(["MLO", "CC"]),
    st.integers(0, 20),
)


@given(st.lists(key_strategy, max_size=25))
def test_dedupe_idempotent_and_keeps_max_per_key(keys):
    rs = [rec(f"r{i}", study=s, lat=l, view=v, dt=t) for i, (s, l, v, t) in enumerate(keys)]
    once = dedupe_latest(rs)
    assert dedupe_latest(once) == once
    got = {(r.study_id, r.laterality, r.view): r.acquisition_time for r in once}
    assert len(got) == len(once)
    for r in rs:
        assert got[(r.study_id, r.laterality, r.view)] >= r.acquisition_time


# ------------------------------------------------------------ invert


def test_invert_flag_false_is_noop():
    px = np.array([[0.0, 100.0]] * 16 + [[3.0, 4.0]] * 0).repeat(8, axis=1)
    r = rec("a", pixels=px)
    assert maybe_invert(r) is r


def test_invert_two_values():
    px = np.zeros((16, 16))
    px[:, 8:] = 100
    out = maybe_invert(rec("a", inverted=True, pixels=px))
    assert not out.photometric_inverted
    np.testing.assert_array_equal(out.pixels[:, :8], 100)
    np.testing.assert_array_equal(out.pixels[:, 8:], 0)


def test_invert_constant_image_goes_to_zero():
    out = maybe_invert(rec("a", inverted=True, pixels=np.full((16, 16), 7.0)))
    np.testing.assert_array_equal(out.pixels, 0)


@given(arrays(np.float64, (16, 16), elements=st.floats(0, 1000)))
def test_invert_twice_is_involution(px):
    once = maybe_invert(rec("a", inverted=True, pixels=px))
    twice = maybe_invert(RawImageRecord(**{**once.__dict__, "photometric_inverted": True}))
    # max - (max - p) recovers p up to the image minimum shift
    np.testing.assert_allclose(twice.pixels, px - px.min(), atol=1e-9)


def test_record_validation():
    with pytest.raises(PreprocessError):
        rec("a", pixels=np.ones((8, 20)))
    with pytest.raises(PreprocessError):
        rec("a", pixels=-np.ones((20, 20)))
    with pytest.raises(PreprocessError):
        rec("a", lat="Both")


# ------------------------------------------------------------ crop


def test_crop_single_pixel():
    img = np.zeros((30, 40))
    img[12, 33] = 5.0
    out = crop_tissue(img, 0.5)
    assert out.shape == (1, 1) and out[0, 0] == 5.0


def test_crop_all_zero_returns_full_grid():
    img = np.zeros((30, 40))
    assert crop_tissue(img, 0.5).shape == (30, 40)


def brute_force_box(img, thr):
    rows = [r for r in range(img.shape[0]) if any(img[r, c] > thr * img.max() for c in range(img.shape[1]))]
    cols = [c for c in range(img.shape[1]) if any(img[r, c] > thr * img.max() for r in range(img.shape[0]))]
    return img[min(rows):max(rows) + 1, min(cols):max(cols) + 1]


def test_crop_rectangle_matches_brute_force():
    img = np.zeros((100, 100))
    img[30:40, 50:70] = 1.0
    out = crop_tissue(img, 0.1)
    assert out.shape == (10, 20)
    np.testing.assert_array_equal(out, brute_force_box(img, 0.1))


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(0, 10)),
       st.floats(0, 1))
def test_crop_contains_all_bright_pixels(img, thr):
    out = crop_tissue(img, thr)
    assert out.shape[0] <= img.shape[0] and out.shape[1] <= img.shape[1]
    bright = img > thr * img.max()
    if bright.any():
        assert (out > thr * img.max()).sum() == bright.sum()
        np.testing.assert_array_equal(out, brute_force_box(img, thr))
    else:
        assert out.shape == img.shape


# ------------------------------------------------------------ stitch


def test_stitch_constant_pair():
    out = stitch_pair(np.full((300, 120), 0.4), np.full((300, 120), 0.4))
    assert out.shape == (CANONICAL_SIZE, CANONICAL_SIZE)
    np.testing.assert_allclose(out, 0.4)


def test_stitch_places_right_view_on_left_half():
    out = stitch_pair(np.zeros((90, 40)), np.ones((50, 70)))
    half = CANONICAL_SIZE // 2
    # one column of interpolation blur tolerated on each side of the seam
    assert out[:, : half - 1].mean() == pytest.approx(1.0)
    assert out[:, half + 1:].mean() == pytest.approx(0.0)
    assert out[:, :half].mean() > 0.99 and out[:, half:].mean() < 0.01


def test_stitch_each_side_is_two_to_one():
    # a distinctive left view: its bright top-left quadrant must land in the
    # top-left quadrant of the right half after the 2:1 resize
    left = np.zeros((40, 40))
    left[:20, :20] = 1.0
    out = stitch_pair(left, np.zeros((40, 40)), height=256)
    side = out[:, 128:]
    assert side.shape == (256, 128)
    assert side[:128, :64].mean() > 0.95
    assert side[128:, :].mean() < 0.05 and side[:, 64:].mean() < 0.05


@given(st.integers(16, 80), st.integers(16, 80), st.integers(16, 80), st.integers(16, 80))
@settings(max_examples=20)
def test_stitch_output_always_canonical(h1, w1, h2, w2):
    rng = np.random.default_rng(h1 * w2)
    out = stitch_pair(rng.random((h1, w1)), rng.random((h2, w2)))
    assert out.shape == (CANONICAL_SIZE, CANONICAL_SIZE)


def test_stitch_rejects_mismatched_views():
    with pytest.raises(PairingError):
        stitch_pair(np.ones((20, 20)), np.ones((20, 20)), left_view="MLO", right_view="CC")


# ------------------------------------------------------------ normalize


def test_normalize_affine():
    img = np.full((256, 256), 4.0)
    img[0, 0], img[0, 1] = 2.0, 6.0
    out = normalize_minmax(img).pixels
    assert (out[0, 0], out[1, 1], out[0, 1]) == (0.0, 0.5, 1.0)


def test_normalize_constant_to_zero():
    np.testing.assert_array_equal(normalize_minmax(np.full((256, 256), 3.0)).pixels, 0)


def test_normalize_unchanged_when_already_normalized():
    img = np.random.default_rng(0).random((256, 256))
    img[0, 0], img[0, 1] = 0.0, 1.0
    np.testing.assert_array_equal(normalize_minmax(img).pixels, img)


def test_normalize_requires_canonical_size():
    with pytest.raises(PreprocessError):
        normalize_minmax(np.ones((10, 10)))


@settings(max_examples=30)
@given(arrays(np.float64, (256, 256), elements=st.floats(0, 1e4)))
def test_normalize_invariants_and_idempotence(img):
    once = normalize_minmax(img).pixels
    assert once.min() >= 0 and once.max() <= 1
    if img.max() > img.min():
        assert once.min() == 0 and once.max() == 1
    else:
        assert not once.any()
    np.testing.assert_array_equal(normalize_minmax(once).pixels, once)


# ------------------------------------------------------------ pipeline


def test_preprocess_records_pairs_and_drops_orphans():
    rng = np.random.default_rng(1)
    rs = [
        rec("a", "s1", "Left", "MLO", pixels=rng.random((40, 30))),
        rec("b", "s1", "Right", "MLO", pixels=rng.random((40, 30))),
        rec("c", "s2", "Left", "MLO", pixels=rng.random((40, 30))),
        rec("d", "s1", "Left", "CC", pixels=rng.random((40, 30)), inverted=True),
        rec("e", "s1", "Right", "CC", pixels=rng.random((40, 30))),
    ]
    out = preprocess_records(rs)
    assert [s.image_id for s in out] == ["s1_CC", "s1_MLO"]
    assert (out[1].right_source, out[1].left_source) == ("b", "a")
    assert "invert" in out[0].image.provenance and "invert" not in out[1].image.provenance
    for s in out:
        assert s.image.pixels.shape == (256, 256)
        assert s.image.pixels.min() == 0 and s.image.pixels.max() == 1


def test_prune_intensity_outliers():
    images = [np.full((4, 4), 0.5)] * 30 + [np.full((4, 4), 0.49), np.full((4, 4), 100.0)]
    keep = prune_intensity_outliers(images)
    assert 31 not in keep and len(keep) == 31


def test_minmax_any_shape():
    np.testing.assert_array_equal(minmax(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])
