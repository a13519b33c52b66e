import json

import numpy as np
import pytest

from pastiche.datasetgen import (
    AugmentationConfig,
    DatasetManifest,
    augment_subject,
    build_sample,
    build_synthetic_corpus,
    caption_for,
    irregularize_mask,
    materialize_training_set,
    sample_from_corpus,
)
from pastiche.imaging import (
    AlphaMatte,
    BBox,
    BoundsError,
    EmptyMatteError,
    Exemplar,
    RasterImage,
    extract_subject,
    load_matte,
    make_mask,
)

from conftest import solid_subject_image


def no_aug(**overrides) -> AugmentationConfig:
    base = dict(p_hflip=0, p_rotate=0, p_hsv=0, p_blur=0, p_elastic=0, irregular_prob=0)
    base.update(overrides)
    return AugmentationConfig(**base)


def textured_exemplar(h=12, w=10, seed=4):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.1, 1.0, (h, w, 3)).astype(np.float32)
    matte = np.ones((h, w), dtype=np.float32)
    return Exemplar(RasterImage(img), AlphaMatte(matte))


class TestAugmentSubject:
    def test_all_zero_probabilities_is_identity(self):
        ex = textured_exemplar()
        out, applied = augment_subject(ex, no_aug(), np.random.default_rng(0))
        assert applied == []
        assert np.array_equal(out.image.data, ex.image.data)
        assert np.array_equal(out.matte.data, ex.matte.data)

    def test_hflip_is_involution(self):
        ex = textured_exemplar()
        cfg = no_aug(p_hflip=1.0)
        once, applied = augment_subject(ex, cfg, np.random.default_rng(0))
        assert applied == ["hflip"]
        twice, _ = augment_subject(once, cfg, np.random.default_rng(1))
        assert np.array_equal(twice.image.data, ex.image.data)
        assert np.array_equal(twice.matte.data, ex.matte.data)

    def test_each_transform_changes_something(self):
        ex = textured_exemplar(16, 16)
        for name, key in [("rotate", "p_rotate"), ("hsv", "p_hsv"),
                          ("blur", "p_blur"), ("elastic", "p_elastic")]:
            out, applied = augment_subject(ex, no_aug(**{key: 1.0}), np.random.default_rng(7))
            assert applied == [name]
            same_shape = out.image.data.shape == ex.image.data.shape
            assert not (same_shape and np.array_equal(out.image.data, ex.image.data)), name

    def test_empirical_rates_match_probabilities(self):
        # Monte-Carlo frequency count over 20000 seeded draws; tolerance +-1%.
        ex = textured_exemplar(8, 8)
        cfg = AugmentationConfig()
        rng = np.random.default_rng(2024)
        counts = {name: 0 for name in cfg.probabilities}
        n = 20_000
        for _ in range(n):
            _, applied = augment_subject(ex, cfg, rng)
            for name in applied:
                counts[name] += 1
        for name, p in cfg.probabilities.items():
            rate = counts[name] / n
            assert abs(rate - p) <= 0.01, (name, rate)

    def test_deterministic_given_seed(self):
        ex = textured_exemplar(16, 16)
        cfg = AugmentationConfig(p_hflip=0.5, p_rotate=0.5, p_hsv=0.5, p_blur=0.5, p_elastic=0.5)
        a, names_a = augment_subject(ex, cfg, np.random.default_rng(42))
        b, names_b = augment_subject(ex, cfg, np.random.default_rng(42))
        assert names_a == names_b
        assert np.array_equal(a.image.data, b.image.data)
        assert np.array_equal(a.matte.data, b.matte.data)

    def test_matte_transported_with_geometry(self):
        # Rotate-then-threshold must agree with threshold-then-rotate up to
        # interpolation tolerance (mean absolute difference < 0.02). A disk
        # subject keeps its own bounding box under rotation, so the two paths
        # stay comparable; a +-1 px shift search absorbs re-crop offsets.
        size = 160
        yy, xx = np.mgrid[0:size, 0:size]
        r = np.sqrt((yy - size / 2 + 0.5) ** 2 + (xx - size / 2 + 0.5) ** 2)
        soft = np.clip(size / 2 - r, 0.0, 1.0).astype(np.float32)  # 1 px feather
        img = RasterImage(np.ones((size, size, 3), dtype=np.float32))
        ex_soft = extract_subject(img, AlphaMatte(soft), 0.01)
        hard = (soft >= 0.5).astype(np.float32)
        ex_hard = extract_subject(img, AlphaMatte(hard), 0.5)

        cfg = no_aug(p_rotate=1.0)
        out_soft, _ = augment_subject(ex_soft, cfg, np.random.default_rng(3))
        out_hard, _ = augment_subject(ex_hard, cfg, np.random.default_rng(3))
        a = (out_soft.matte.data >= 0.5).astype(np.float32)
        b = out_hard.matte.data

        pad = 2
        side = max(a.shape[0], b.shape[0], a.shape[1], b.shape[1]) + 2 * pad
        canvas_a = np.zeros((side, side), np.float32)
        oy, ox = (side - a.shape[0]) // 2, (side - a.shape[1]) // 2
        canvas_a[oy : oy + a.shape[0], ox : ox + a.shape[1]] = a
        best = np.inf
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                canvas_b = np.zeros((side, side), np.float32)
                oy = (side - b.shape[0]) // 2 + dy
                ox = (side - b.shape[1]) // 2 + dx
                canvas_b[oy : oy + b.shape[0], ox : ox + b.shape[1]] = b
                best = min(best, float(np.abs(canvas_a - canvas_b).mean()))
        assert best < 0.02


class TestIrregularizeMask:
    def test_probability_zero_gives_rectangle(self):
        box = BBox(4, 6, 10, 8)
        mask = irregularize_mask(box, 32, 32, 0.0, np.random.default_rng(0))
        assert np.array_equal(mask.data, make_mask(box, 32, 32).data)

    def test_containment_guarantees(self):
        # Inner 60% rectangle always covered; 110% dilated box never exceeded.
        rng = np.random.default_rng(5)
        box = BBox(8, 8, 14, 12)
        for _ in range(200):
            mask = irregularize_mask(box, 40, 40, 1.0, rng)
            iw, ih = round(box.w * 0.6), round(box.h * 0.6)
            ix = box.x + (box.w - iw) // 2
            iy = box.y + (box.h - ih) // 2
            assert mask.data[iy : iy + ih, ix : ix + iw].all()
            dx, dy = round(box.w * 0.1), round(box.h * 0.1)
            outside = mask.data.copy()
            outside[max(0, box.y - dy) : box.y2 + dy, max(0, box.x - dx) : box.x2 + dx] = 0
            assert not outside.any()

    def test_irregular_rate(self):
        box = BBox(4, 4, 12, 12)
        rect = make_mask(box, 32, 32).data
        rng = np.random.default_rng(77)
        n = 10_000
        irregular = 0
        for _ in range(n):
            mask = irregularize_mask(box, 32, 32, 0.5, rng)
            if not np.array_equal(mask.data, rect):
                irregular += 1
        assert 0.48 <= irregular / n <= 0.52

    def test_out_of_bounds_box(self):
        with pytest.raises(BoundsError):
            irregularize_mask(BBox(30, 30, 10, 10), 32, 32, 0.5, np.random.default_rng(0))


class TestBuildSample:
    def test_identity_reconstruction(self):
        # No augmentation, opaque matte, rectangular mask == subject box:
        # the composite must equal the source bit-exactly inside the mask.
        img, matte, box = solid_subject_image()
        sample = build_sample(img, box, no_aug(), np.random.default_rng(0), matte=matte)
        m = sample.composite.mask.data == 1
        assert np.array_equal(sample.composite.image.data[m], img.data[m])
        assert np.array_equal(sample.composite.image.data[~m], img.data[~m])
        assert np.array_equal(sample.target.data, img.data)

    def test_deterministic(self):
        img, matte, box = solid_subject_image()
        cfg = AugmentationConfig()
        a = build_sample(img, box, cfg, np.random.default_rng(9), matte=matte)
        b = build_sample(img, box, cfg, np.random.default_rng(9), matte=matte)
        assert np.array_equal(a.composite.image.data, b.composite.image.data)
        assert np.array_equal(a.composite.mask.data, b.composite.mask.data)
        assert a.caption == b.caption

    def test_elastic_changes_masked_region_only(self):
        img, matte, box = solid_subject_image()
        base = build_sample(img, box, no_aug(), np.random.default_rng(1), matte=matte)
        warped = build_sample(img, box, no_aug(p_elastic=1.0), np.random.default_rng(1), matte=matte)
        m = base.composite.mask.data == 1
        assert not np.array_equal(warped.composite.image.data[m], base.composite.image.data[m])
        assert np.array_equal(warped.target.data, base.target.data)

    def test_empty_matte_propagates(self):
        img = RasterImage(np.full((32, 32, 3), 0.5, dtype=np.float32))
        with pytest.raises(EmptyMatteError):
            build_sample(img, BBox(4, 4, 10, 10), no_aug(), np.random.default_rng(0))


class TestCaptions:
    def test_template(self):
        meta = {"color": "red", "shape": "disk", "background": "blue"}
        assert caption_for(meta) == "a photo of a red disk on a blue background"

    def test_passthrough(self):
        assert caption_for({"caption": "my own words"}) == "my own words"

    def test_fallback(self):
        assert caption_for(None) == "a photo"
        assert caption_for({"color": "red"}) == "a photo"


class TestSyntheticCorpus:
    def test_single_entry_matte_matches_stored(self, tmp_path):
        manifest = build_synthetic_corpus(1, 32, seed=5, out_dir=str(tmp_path))
        assert manifest.count == 1
        sample = manifest.samples[0]
        matte = load_matte(manifest.path(sample["matte"]))
        assert matte.data.max() > 0

    def test_bboxes_within_bounds(self, tiny_corpus):
        for sample in tiny_corpus.samples:
            b = sample["bbox"]
            box = BBox(b["x"], b["y"], b["w"], b["h"])
            box.validate_within(32, 32)
            assert sample["caption"].startswith("a photo of a ")

    def test_matte_consistent_with_subject_box(self, tiny_corpus):
        for i in range(tiny_corpus.count):
            sample = tiny_corpus.samples[i]
            matte = load_matte(tiny_corpus.path(sample["matte"]))
            ys, xs = np.nonzero(matte.data > 0)
            b = sample["bbox"]
            assert xs.min() == b["x"] and ys.min() == b["y"]
            assert xs.max() - xs.min() + 1 == b["w"]
            assert ys.max() - ys.min() + 1 == b["h"]

    def test_seed_determinism_byte_identical(self, tmp_path):
        m1 = build_synthetic_corpus(3, 32, seed=9, out_dir=str(tmp_path / "a"))
        m2 = build_synthetic_corpus(3, 32, seed=9, out_dir=str(tmp_path / "b"))
        for s1, s2 in zip(m1.samples, m2.samples):
            b1 = open(m1.path(s1["target"]), "rb").read()
            b2 = open(m2.path(s2["target"]), "rb").read()
            assert b1 == b2
        assert json.dumps(m1.samples) == json.dumps(m2.samples)

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError):
            build_synthetic_corpus(0, 32, seed=0, out_dir=str(tmp_path))


class TestManifests:
    def test_materialize_and_reload(self, tiny_corpus, tmp_path):
        out = tmp_path / "train"
        manifest = materialize_training_set(tiny_corpus, AugmentationConfig(), str(out), seed=3)
        assert manifest.kind == "training"
        assert manifest.count == tiny_corpus.count
        reloaded = DatasetManifest.load(str(out / "manifest.json"))
        assert reloaded.count == manifest.count
        assert reloaded.samples[0]["caption"] == manifest.samples[0]["caption"]

    def test_missing_file_detected(self, tiny_corpus, tmp_path):
        out = tmp_path / "train"
        manifest = materialize_training_set(tiny_corpus, AugmentationConfig(), str(out), seed=3)
        target = out / manifest.samples[0]["composite"]
        target.unlink()
        with pytest.raises(FileNotFoundError):
            DatasetManifest.load(str(out / "manifest.json"))

    def test_sample_from_corpus_deterministic(self, tiny_corpus):
        cfg = AugmentationConfig()
        a = sample_from_corpus(tiny_corpus, 0, cfg, np.random.default_rng(1))
        b = sample_from_corpus(tiny_corpus, 0, cfg, np.random.default_rng(1))
        assert np.array_equal(a.composite.image.data, b.composite.image.data)
