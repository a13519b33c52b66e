import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pastiche.imaging import (
    AlphaMatte,
    BBox,
    BinaryMask,
    BoundsError,
    EmptyMatteError,
    Exemplar,
    ImagingError,
    RasterImage,
    SizeMismatchError,
    extract_subject,
    fit_resize,
    load_image,
    load_mask,
    make_mask,
    paste,
    save_image,
    save_mask,
    threshold_matte,
)

from conftest import solid_subject_image


def ones_image(h=8, w=8, value=0.5):
    return RasterImage(np.full((h, w, 3), value, dtype=np.float32))


class TestTypes:
    def test_image_value_range_enforced(self):
        with pytest.raises(ImagingError):
            RasterImage(np.full((8, 8, 3), 1.5, dtype=np.float32))

    def test_full_image_minimum_side(self):
        small = RasterImage(np.zeros((4, 8, 3), dtype=np.float32))  # crops may be tiny
        with pytest.raises(ImagingError):
            small.require_full_size()

    def test_mask_strictly_binary(self):
        with pytest.raises(ImagingError):
            BinaryMask(np.full((8, 8), 2, dtype=np.uint8))

    def test_bbox_bounds(self):
        with pytest.raises(BoundsError):
            BBox(-1, 0, 4, 4)
        with pytest.raises(BoundsError):
            BBox(0, 0, 0, 4)
        BBox(0, 0, 4, 4).validate_within(8, 8)
        with pytest.raises(BoundsError):
            BBox(6, 6, 4, 4).validate_within(8, 8)

    def test_bbox_json_round_trip(self):
        box = BBox(2, 3, 4, 5)
        assert BBox.from_json(box.to_json()) == box

    def test_exemplar_requires_zero_background(self):
        img = np.full((8, 8, 3), 0.5, dtype=np.float32)
        matte = np.zeros((8, 8), dtype=np.float32)
        matte[0, 0] = 1.0
        matte[-1, -1] = 1.0
        with pytest.raises(ImagingError):
            Exemplar(RasterImage(img), AlphaMatte(matte))


class TestExtractSubject:
    def test_full_matte_is_identity(self):
        img = ones_image()
        matte = AlphaMatte(np.ones((8, 8), dtype=np.float32))
        ex = extract_subject(img, matte, 0.5)
        assert np.array_equal(ex.image.data, img.data)
        assert np.array_equal(ex.matte.data, matte.data)

    def test_crop_offsets_match_bruteforce(self):
        # Oracle: scan min/max indices of the thresholded matte directly.
        matte = np.zeros((8, 8), dtype=np.float32)
        matte[2:6, 3:8] = 1.0
        img = RasterImage(np.linspace(0, 1, 8 * 8 * 3, dtype=np.float32).reshape(8, 8, 3))
        sel = matte >= 0.5
        ys, xs = np.nonzero(sel)
        expect_shape = (ys.max() - ys.min() + 1, xs.max() - xs.min() + 1)
        ex = extract_subject(img, AlphaMatte(matte), 0.5)
        assert (ex.height, ex.width) == expect_shape == (4, 5)
        assert np.array_equal(ex.image.data, img.data[2:6, 3:8])

    def test_empty_matte_errors(self):
        with pytest.raises(EmptyMatteError):
            extract_subject(ones_image(), AlphaMatte(np.zeros((8, 8), np.float32)), 0.5)

    def test_background_zeroed_soft_matte_kept(self):
        matte = np.zeros((8, 8), dtype=np.float32)
        matte[2:6, 2:6] = 0.7
        ex = extract_subject(ones_image(), AlphaMatte(matte), 0.5)
        assert np.all(ex.matte.data == 0.7)
        assert np.all(ex.image.data == 0.5)


class TestFitResize:
    def test_uniform_upscale(self):
        ex = Exemplar(ones_image(10, 10), AlphaMatte(np.ones((10, 10), np.float32)))
        out = fit_resize(ex, BBox(0, 0, 20, 20))
        assert (out.height, out.width) == (20, 20)

    def test_aspect_preserving_scale_matches_oracle(self):
        # Oracle: scale = min(box_h/h, box_w/w), rounded to nearest int >= 1.
        h, w, box_h, box_w = 10, 20, 40, 40
        scale = min(box_h / h, box_w / w)
        expect = (max(1, round(h * scale)), max(1, round(w * scale)))
        ex = Exemplar(ones_image(h, w), AlphaMatte(np.ones((h, w), np.float32)))
        out = fit_resize(ex, BBox(0, 0, box_w, box_h))
        assert (out.height, out.width) == expect == (20, 40)

    def test_identity_is_bit_equal(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
        matte = np.ones((8, 8), dtype=np.float32)
        ex = Exemplar(RasterImage(img), AlphaMatte(matte))
        out = fit_resize(ex, BBox(0, 0, 8, 8))
        assert np.array_equal(out.image.data, img)
        assert np.array_equal(out.matte.data, matte)

    def test_never_exceeds_box(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            h, w = int(rng.integers(2, 30)), int(rng.integers(2, 30))
            bh, bw = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            ex = Exemplar(
                RasterImage(np.clip(rng.uniform(0.1, 1, (max(h, 8), max(w, 8), 3)), 0, 1).astype(np.float32)),
                AlphaMatte(np.ones((max(h, 8), max(w, 8)), np.float32)),
            )
            out = fit_resize(ex, BBox(0, 0, bw, bh))
            assert out.height <= bh and out.width <= bw


class TestPaste:
    def test_opaque_exact_fit(self, checker_scene):
        box = BBox(4, 6, 10, 12)
        sub = np.random.default_rng(1).uniform(0, 1, (12, 10, 3)).astype(np.float32)
        ex = Exemplar(RasterImage(sub), AlphaMatte(np.ones((12, 10), np.float32)))
        comp = paste(checker_scene, ex, box)
        assert np.array_equal(comp.image.data[box.y : box.y2, box.x : box.x2], sub)
        outside = comp.mask.data == 0
        assert np.array_equal(comp.image.data[outside], checker_scene.data[outside])

    def test_alpha_blend_against_hole(self, checker_scene):
        # Hand oracle: matte 0.5, exemplar 1.0, hole 0 -> composite 0.5.
        box = BBox(0, 0, 8, 8)
        ex = Exemplar(
            RasterImage(np.ones((8, 8, 3), np.float32)),
            AlphaMatte(np.full((8, 8), 0.5, np.float32)),
        )
        comp = paste(checker_scene, ex, box)
        assert np.allclose(comp.image.data[0:8, 0:8], 0.5)

    def test_mask_outside_box_rejected(self, checker_scene):
        box = BBox(4, 4, 8, 8)
        stray = np.zeros((32, 32), dtype=np.uint8)
        stray[20:24, 20:24] = 1  # zero overlap with the box
        ex = Exemplar(RasterImage(np.ones((8, 8, 3), np.float32)),
                      AlphaMatte(np.ones((8, 8), np.float32)))
        with pytest.raises(BoundsError):
            paste(checker_scene, ex, box, BinaryMask(stray))

    def test_oversized_exemplar_rejected(self, checker_scene):
        ex = Exemplar(RasterImage(np.ones((12, 12, 3), np.float32)),
                      AlphaMatte(np.ones((12, 12), np.float32)))
        with pytest.raises(SizeMismatchError):
            paste(checker_scene, ex, BBox(0, 0, 8, 8))

    def test_background_preserved_exactly_under_irregular_mask(self, checker_scene):
        box = BBox(4, 4, 16, 16)
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[6:18, 6:18] = 1
        mask[6:8, 6:8] = 0  # carve a notch: exemplar overlaps mask=0 pixels
        ex = Exemplar(RasterImage(np.ones((16, 16, 3), np.float32)),
                      AlphaMatte(np.ones((16, 16), np.float32)))
        comp = paste(checker_scene, ex, box, BinaryMask(mask))
        outside = mask == 0
        assert np.array_equal(comp.image.data[outside], checker_scene.data[outside])

    def test_idempotent_for_opaque_matte(self, checker_scene):
        box = BBox(2, 2, 9, 9)
        sub = np.random.default_rng(2).uniform(0, 1, (9, 9, 3)).astype(np.float32)
        ex = Exemplar(RasterImage(sub), AlphaMatte(np.ones((9, 9), np.float32)))
        once = paste(checker_scene, ex, box)
        twice = paste(once.image, ex, box)
        assert np.array_equal(once.image.data, twice.image.data)


class TestMakeMask:
    def test_full_box(self):
        mask = make_mask(BBox(0, 0, 8, 8), 8, 8)
        assert mask.area == 64

    def test_area_counts(self):
        mask = make_mask(BBox(2, 2, 3, 3), 8, 8)
        assert mask.area == 9
        assert mask.bounding_box() == BBox(2, 2, 3, 3)

    def test_out_of_bounds(self):
        with pytest.raises(BoundsError):
            make_mask(BBox(4, 4, 8, 8), 8, 8)


class TestThresholdMatte:
    def test_uniform_image_gives_zero_matte(self):
        matte = threshold_matte(ones_image())
        assert np.array_equal(matte.data, np.zeros((8, 8), np.float32))

    def test_white_square_on_black(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[5:10, 5:10] = 1.0
        matte = threshold_matte(RasterImage(img))
        # Oracle: exact distances for the two colors, normalized by the max.
        assert np.allclose(matte.data[5:10, 5:10], 1.0)
        assert np.allclose(matte.data[0:3, 0:3], 0.0)

    def test_bimodal_border_still_valid(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        matte = threshold_matte(RasterImage(img))
        assert matte.data.min() >= 0.0 and matte.data.max() <= 1.0


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    bw=st.integers(2, 16),
    bh=st.integers(2, 16),
    alpha=st.floats(0.0, 1.0),
)
def test_paste_outputs_stay_in_range(seed, bw, bh, alpha):
    rng = np.random.default_rng(seed)
    scene = RasterImage(rng.uniform(0, 1, (24, 24, 3)).astype(np.float32))
    sub = rng.uniform(0, 1, (bh, bw, 3)).astype(np.float32)
    matte = np.full((bh, bw), np.float32(alpha))
    matte[0, 0] = 1.0  # keep the matte nonempty and tight
    matte[-1, -1] = 1.0
    sub[matte == 0] = 0.0
    ex = Exemplar(RasterImage(sub), AlphaMatte(matte))
    comp = paste(scene, ex, BBox(3, 4, bw, bh))
    assert comp.image.data.min() >= 0.0
    assert comp.image.data.max() <= 1.0


def test_png_round_trip(tmp_path, checker_scene):
    path = tmp_path / "img.png"
    save_image(path, checker_scene)
    loaded = load_image(path)
    assert np.abs(loaded.data - checker_scene.data).max() <= 0.5 / 255 + 1e-6

    mask = make_mask(BBox(2, 2, 5, 5), 32, 32)
    mpath = tmp_path / "mask.png"
    save_mask(mpath, mask)
    assert np.array_equal(load_mask(mpath).data, mask.data)


def test_solid_subject_helper_consistency():
    img, matte, box = solid_subject_image()
    ex = extract_subject(img, matte, 0.5)
    assert (ex.height, ex.width) == (box.h, box.w)
    assert np.array_equal(ex.image.data, img.data[box.y : box.y2, box.x : box.x2])
