"""Slide format, color conversion, Otsu thresholding, sampling, resizing."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tristream.errors import (BoundsError, DegenerateHistogram, EmptyMaskError,
                              FormatError, SpecError)
from tristream.slides import (DatasetManifest, LevelInfo, PyramidalSlide,
                              SlideSpec, TileRecord, choose_working_level,
                              extract_tile, extract_tile_array,
                              generate_synthetic_slide, hsv_to_rgb,
                              load_manifest, load_slide, map_coords,
                              mean_pool2, otsu_threshold, read_pgm,
                              resize_tile, rgb_to_hsv, sample_balanced_tiles,
                              save_manifest, save_slide, tissue_mask,
                              write_pgm, write_ppm)


def exhaustive_otsu(channel):
    """Independent loop-based Otsu oracle: scan all 255 candidate splits."""
    hist = np.bincount(np.asarray(channel, np.uint8).reshape(-1), minlength=256)
    total = hist.sum()
    best_t, best_sigma = 0, -1.0
    for t in range(255):
        w0 = hist[: t + 1].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            sigma = 0.0
        else:
            mu0 = (hist[: t + 1] * np.arange(t + 1)).sum() / w0
            mu1 = (hist[t + 1:] * np.arange(t + 1, 256)).sum() / w1
            sigma = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
        if sigma > best_sigma + 1e-12:
            best_sigma, best_t = sigma, t
    return best_t


class TestPnmIO:
    def test_ppm_round_trip(self, rng, tmp_path):
        img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        assert path.read_bytes().startswith(b"P6\n7 5\n255\n")

    def test_pgm_round_trip(self, rng, tmp_path):
        img = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
        path = tmp_path / "img.pgm"
        write_pgm(path, img)
        np.testing.assert_array_equal(read_pgm(path), img)

    def test_truncated_pgm(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(FormatError):
            read_pgm(path)


class TestSlideDirectory:
    def test_save_load_round_trip(self, synthetic_slides, tmp_path):
        slide = synthetic_slides["s0"]
        save_slide(slide, tmp_path / "s0")
        loaded = load_slide(tmp_path / "s0")
        assert loaded.slide_id == "s0"
        assert loaded.level_count == 3
        for level in range(3):
            np.testing.assert_array_equal(loaded.read_level(level),
                                          slide.read_level(level))
        np.testing.assert_array_equal(loaded.malignancy_mask(),
                                      slide.malignancy_mask())
        np.testing.assert_array_equal(loaded.tissue_mask_gt, slide.tissue_mask_gt)

    def test_lazy_region_matches_full_decode(self, synthetic_slides, tmp_path):
        slide = synthetic_slides["s1"]
        save_slide(slide, tmp_path / "s1")
        loaded = load_slide(tmp_path / "s1")
        region = loaded.read_region(0, 100, 60, 33, 17)
        np.testing.assert_array_equal(region,
                                      slide.read_level(0)[60:77, 100:133])

    def test_missing_meta(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FormatError):
            load_slide(tmp_path / "empty")

    def test_missing_level_file(self, synthetic_slides, tmp_path):
        save_slide(synthetic_slides["s0"], tmp_path / "s0")
        (tmp_path / "s0" / "level_1.ppm").unlink()
        with pytest.raises(FormatError):
            load_slide(tmp_path / "s0")

    def test_nonmonotone_downsamples_rejected(self, synthetic_slides, tmp_path):
        save_slide(synthetic_slides["s0"], tmp_path / "s0")
        meta_path = tmp_path / "s0" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["levels"][1]["downsample"] = 1
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(FormatError):
            load_slide(tmp_path / "s0")

    def test_out_of_bounds_region(self, synthetic_slides):
        with pytest.raises(BoundsError):
            synthetic_slides["s0"].read_region(0, 500, 500, 32, 32)


class TestSyntheticSlides:
    def test_level_geometry(self, synthetic_slides):
        slide = synthetic_slides["s0"]
        assert [(li.downsample, li.width, li.height) for li in slide.levels] == [
            (1, 512, 512), (4, 128, 128), (16, 32, 32)]

    def test_deterministic(self):
        a = generate_synthetic_slide(SlideSpec(seed=5))
        b = generate_synthetic_slide(SlideSpec(seed=5))
        for level in range(3):
            np.testing.assert_array_equal(a.read_level(level), b.read_level(level))

    def test_pyramid_levels_are_mean_pools(self, synthetic_slides):
        slide = synthetic_slides["s0"]
        np.testing.assert_array_equal(slide.read_level(1),
                                      mean_pool2(mean_pool2(slide.read_level(0))))
        np.testing.assert_array_equal(slide.read_level(2),
                                      mean_pool2(mean_pool2(slide.read_level(1))))

    def test_masks_match_spec_rectangles(self):
        spec = SlideSpec(tissue_region=(10, 20, 100, 80),
                         malignant_region=(10, 20, 40, 80))
        slide = generate_synthetic_slide(spec)
        gt = np.zeros((512, 512), dtype=bool)
        gt[20:100, 10:110] = True
        np.testing.assert_array_equal(slide.tissue_mask_gt, gt)
        mal = np.zeros((512, 512), dtype=bool)
        mal[20:100, 10:50] = True
        np.testing.assert_array_equal(slide.malignancy_mask(), mal)

    def test_invalid_regions_rejected(self):
        with pytest.raises(SpecError):
            generate_synthetic_slide(SlideSpec(tissue_region=(400, 400, 200, 200)))
        with pytest.raises(SpecError):
            generate_synthetic_slide(SlideSpec(malignant_region=(0, 0, 40, 40)))

    def test_mean_pool_rounds_half_up(self):
        block = np.array([[1, 2], [2, 2]], dtype=np.uint8).reshape(2, 2, 1)
        assert mean_pool2(block)[0, 0, 0] == 2  # mean 1.75 -> 2

    def test_classes_separable_by_mean_color(self, synthetic_slides):
        """Nearest-centroid on tile mean RGB tells the two stains apart."""
        slide = synthetic_slides["s0"]
        manifest = sample_balanced_tiles([slide], 60, tile_side=32, seed=3)
        means = np.array([extract_tile_array(slide, r).mean(axis=(1, 2))
                          for r in manifest.records])
        labels = np.array([r.label for r in manifest.records])
        centroids = np.array([means[labels == c].mean(axis=0) for c in (0, 1)])
        predicted = np.argmin(
            ((means[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
        assert (predicted == labels).mean() >= 0.9


class TestColorConversion:
    def test_pure_red(self):
        hsv = rgb_to_hsv(np.array([[[255, 0, 0]]], dtype=np.uint8))
        np.testing.assert_allclose(hsv[0, 0], [0.0, 1.0, 1.0], atol=1e-12)

    def test_gray_has_zero_saturation(self):
        hsv = rgb_to_hsv(np.array([[[128, 128, 128]]], dtype=np.uint8))
        assert hsv[0, 0, 1] == 0.0
        assert hsv[0, 0, 2] == pytest.approx(128 / 255)

    def test_primary_hues(self):
        img = np.array([[[0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
        hsv = rgb_to_hsv(img)
        assert hsv[0, 0, 0] == pytest.approx(120.0)
        assert hsv[0, 1, 0] == pytest.approx(240.0)

    def test_round_trip_within_one_step(self, rng):
        img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        back = hsv_to_rgb(rgb_to_hsv(img))
        assert np.max(np.abs(back.astype(int) - img.astype(int))) <= 1


class TestOtsu:
    def test_clean_bimodal(self):
        channel = np.array([10] * 50 + [200] * 50, dtype=np.uint8)
        t = otsu_threshold(channel)
        assert 10 <= t < 200
        assert t == exhaustive_otsu(channel)

    def test_tie_takes_smallest_threshold(self):
        # 0s and 255s: every t in 0..254 yields the same variance
        channel = np.array([0] * 40 + [255] * 40, dtype=np.uint8)
        assert otsu_threshold(channel) == 0

    def test_constant_channel_degenerate(self):
        with pytest.raises(DegenerateHistogram):
            otsu_threshold(np.full(100, 7, dtype=np.uint8))

    def test_two_adjacent_values(self):
        channel = np.array([100] * 30 + [101] * 70, dtype=np.uint8)
        assert otsu_threshold(channel) == 100

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_values = int(rng.integers(2, 8))
        values = rng.choice(256, size=n_values, replace=False)
        channel = np.repeat(values, rng.integers(1, 50, size=n_values)).astype(np.uint8)
        assert otsu_threshold(channel) == exhaustive_otsu(channel)


class TestTissueMask:
    def test_working_level_on_synthetic_is_zero(self, synthetic_slides):
        assert choose_working_level(synthetic_slides["s0"]) == 0

    def test_working_level_skips_oversized_levels(self):
        levels = [LevelInfo(1, 30000, 30000), LevelInfo(4, 7500, 7500),
                  LevelInfo(16, 1875, 1875)]
        slide = PyramidalSlide("huge", levels)
        assert choose_working_level(slide) == 2

    def test_agreement_with_ground_truth(self, synthetic_slides):
        slide = synthetic_slides["s0"]
        tm = tissue_mask(slide)
        assert tm.level == 0
        agreement = (tm.mask == slide.tissue_mask_gt).mean()
        assert agreement >= 0.99

    def test_blank_slide_has_no_mask(self):
        spec = SlideSpec(benign_color=(255, 255, 255), noise=0,
                         malignant_region=None)
        with pytest.raises(EmptyMaskError):
            tissue_mask(generate_synthetic_slide(spec))

    def test_mask_is_union_of_channels(self, synthetic_slides):
        from tristream.slides import hsv_channels_uint8

        slide = synthetic_slides["s1"]
        image = slide.read_level(0)
        h8, s8, _ = hsv_channels_uint8(rgb_to_hsv(image))
        expected = (h8 > otsu_threshold(h8)) | (s8 > otsu_threshold(s8))
        np.testing.assert_array_equal(tissue_mask(slide, 0).mask, expected)


class TestCoordinateMapping:
    def test_coarse_to_fine_example(self, synthetic_slides):
        slide = synthetic_slides["s0"]
        assert map_coords((10, 20), 2, 0, slide) == (160, 320)

    def test_fine_to_coarse_floors(self, synthetic_slides):
        slide = synthetic_slides["s0"]
        assert map_coords((163, 321), 0, 2, slide) == (10, 20)

    def test_round_trip_error_bounded_by_downsample(self, synthetic_slides):
        slide = synthetic_slides["s0"]
        rng = np.random.default_rng(1)
        for _ in range(50):
            pt = (int(rng.integers(512)), int(rng.integers(512)))
            coarse = map_coords(pt, 0, 2, slide)
            back = map_coords(coarse, 2, 0, slide)
            assert abs(back[0] - pt[0]) < 16 and abs(back[1] - pt[1]) < 16

    def test_out_of_extent_rejected(self, synthetic_slides):
        with pytest.raises(BoundsError):
            map_coords((40, 40), 2, 0, synthetic_slides["s0"])


class TestSampling:
    def test_balanced_counts_and_center_soundness(self, synthetic_slides):
        slides = list(synthetic_slides.values())
        manifest = sample_balanced_tiles(slides, 100, tile_side=32, seed=11)
        assert manifest.counts() == (50, 50)
        for r in manifest.records:
            slide = synthetic_slides[r.slide_id]
            cx, cy = r.center
            if r.label == 1:
                assert slide.malignancy_mask()[cy, cx]
            else:
                assert not slide.malignancy_mask()[cy, cx]
            # every tile fits inside level 0
            w0, h0 = slide.level_dimensions(0)
            assert 0 <= r.x and 0 <= r.y
            assert r.x + r.side <= w0 and r.y + r.side <= h0

    def test_rerun_is_identical(self, synthetic_slides):
        slides = list(synthetic_slides.values())
        a = sample_balanced_tiles(slides, 40, tile_side=32, seed=2)
        b = sample_balanced_tiles(slides, 40, tile_side=32, seed=2)
        assert a.records == b.records

    def test_odd_count_rejected(self, synthetic_slides):
        with pytest.raises(ValueError):
            sample_balanced_tiles(list(synthetic_slides.values()), 7)

    def test_no_malignancy_anywhere(self):
        spec = SlideSpec(malignant_region=None)
        from tristream.errors import SamplingExhausted

        with pytest.raises(SamplingExhausted):
            sample_balanced_tiles([generate_synthetic_slide(spec)], 10, tile_side=32)

    def test_tissue_coverage(self, synthetic_slides):
        """Benign draws spread over the benign half rather than clumping."""
        slide = synthetic_slides["s0"]
        manifest = sample_balanced_tiles([slide], 400, tile_side=32, seed=0)
        benign = np.zeros((8, 8), dtype=bool)
        for r in manifest.records:
            if r.label == 0:
                cx, cy = r.center
                benign[cy // 64, cx // 64] = True
        # the benign band covers roughly half the tissue square
        assert benign.sum() >= 10


class TestTiles:
    def test_extract_matches_direct_crop(self, synthetic_slides):
        slide = synthetic_slides["s0"]
        record = TileRecord("s0", 60, 80, 32, 0)
        tile = extract_tile_array(slide, record)
        crop = slide.read_level(0)[80:112, 60:92].transpose(2, 0, 1) / 255.0
        np.testing.assert_array_equal(tile, crop)
        assert tile.shape == (3, 32, 32)
        assert extract_tile(slide, record).shape == (1, 3, 32, 32)

    def test_extract_out_of_bounds(self, synthetic_slides):
        with pytest.raises(BoundsError):
            extract_tile(synthetic_slides["s0"], TileRecord("s0", 500, 0, 32))

    def test_resize_50_to_197(self, rng):
        tile = rng.random((3, 50, 50))
        out = resize_tile(tile, 197)
        assert out.shape == (3, 197, 197)

    def test_resize_same_size_is_identity(self, rng):
        tile = rng.random((3, 32, 32))
        np.testing.assert_array_equal(resize_tile(tile, 32), tile)

    def test_resize_constant_stays_constant(self):
        out = resize_tile(np.full((3, 50, 50), 0.25), 197)
        np.testing.assert_allclose(out, 0.25, rtol=1e-12)

    def test_resize_preserves_value_range(self, rng):
        tile = rng.random((3, 40, 40))
        out = resize_tile(tile, 97)
        assert out.min() >= tile.min() - 1e-12
        assert out.max() <= tile.max() + 1e-12

    def test_resize_downscale_of_checkerboard_averages(self):
        board = np.indices((2, 2)).sum(axis=0) % 2
        tile = np.tile(board, (25, 25)).astype(np.float64)[None]
        out = resize_tile(tile, 25)
        assert abs(out.mean() - 0.5) < 0.05


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = DatasetManifest(
            records=[TileRecord("s0", 1, 2, 32, 1, "train"),
                     TileRecord("s1", 3, 4, 32, 0, "val")],
            provenance={"seed": 9, "digest": "a" * 16})
        path = tmp_path / "tiles.manifest"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.records == manifest.records
        assert loaded.provenance["seed"] == 9

    def test_header_required(self, tmp_path):
        path = tmp_path / "bad.manifest"
        path.write_text("s0,1,2,32,1,train\n")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "bad.manifest"
        path.write_text("# tristream-manifest seed=0 digest=x\ns0,1,2\n")
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_counts_by_split(self):
        manifest = DatasetManifest(records=[
            TileRecord("s0", 0, 0, 32, 1, "train"),
            TileRecord("s0", 0, 0, 32, 0, "train"),
            TileRecord("s0", 0, 0, 32, 1, "val")])
        assert manifest.counts() == (1, 2)
        assert manifest.counts("train") == (1, 1)
        assert manifest.counts("val") == (0, 1)
