import numpy as np
import pytest

from maskcal.core import BinaryMask, FeatureMap
from maskcal.superpixel import (
    SlicConfig,
    SuperpixelCache,
    SuperpixelMap,
    compute_superpixels,
    enforce_connectivity,
    overlap_areas,
    rgb_to_lab,
)

QUADRANTS = np.repeat(np.repeat(np.array([[0, 1], [2, 3]]), 2, axis=0), 2, axis=1)


def gray(values):
    return FeatureMap(np.asarray(values, dtype=np.float32)[None, ...])


def random_image(rng, channels=1, size=(8, 24)):
    h = int(rng.integers(size[0], size[1]))
    w = int(rng.integers(size[0], size[1]))
    return FeatureMap(rng.random((channels, h, w)).astype(np.float32))


class TestComputeSuperpixels:
    def test_uniform_4x4_gives_quadrants(self):
        sp = compute_superpixels(gray(np.full((4, 4), 0.7)), SlicConfig(target_count=4))
        np.testing.assert_array_equal(sp.labels, QUADRANTS)

    def test_single_cluster(self):
        rng = np.random.default_rng(0)
        img = gray(rng.random((5, 7)))
        sp = compute_superpixels(img, SlicConfig(target_count=1))
        assert sp.count == 1
        assert np.all(sp.labels == 0)

    def test_two_tone_boundary_on_edge(self):
        values = np.zeros((6, 8))
        values[:, 4:] = 100.0
        sp = compute_superpixels(gray(values), SlicConfig(target_count=2, compactness=1e-4))
        assert sp.count == 2
        left = np.unique(sp.labels[:, :4])
        right = np.unique(sp.labels[:, 4:])
        assert len(left) == 1 and len(right) == 1 and left[0] != right[0]

    def test_rejects_bad_channel_count(self):
        img = FeatureMap(np.zeros((2, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="channels"):
            compute_superpixels(img, SlicConfig(target_count=2))

    def test_rejects_count_above_pixels(self):
        with pytest.raises(ValueError, match="exceeds"):
            compute_superpixels(gray(np.zeros((2, 2))), SlicConfig(target_count=5))

    def test_determinism(self):
        rng = np.random.default_rng(42)
        img = random_image(rng, channels=3)
        cfg = SlicConfig(target_count=12)
        a = compute_superpixels(img, cfg)
        b = compute_superpixels(img, cfg)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_partition_invariants_randomized(self):
        rng = np.random.default_rng(9)
        for _ in range(40):
            channels = int(rng.choice([1, 3]))
            img = random_image(rng, channels=channels)
            h, w = img.height, img.width
            count = int(rng.integers(1, min(h * w, 40) + 1))
            sp = compute_superpixels(img, SlicConfig(target_count=count))
            assert sp.labels.shape == (h, w)
            sizes = sp.sizes()
            assert sizes.sum() == h * w and np.all(sizes > 0)
            assert count / 2 <= sp.count <= 2 * count
            assert sp.is_fully_connected()

    def test_boundary_recall_two_region(self):
        rng = np.random.default_rng(17)
        for _ in range(5):
            h, w = 20, 20
            split = int(rng.integers(6, 14))
            values = np.zeros((h, w))
            values[:, split:] = 100.0
            sp = compute_superpixels(gray(values), SlicConfig(target_count=9, compactness=1.0))
            assert _boundary_recall(values, sp.labels) >= 0.95


def _boundary_recall(values, labels, tolerance=1):
    true_edge = np.zeros(values.shape, dtype=bool)
    true_edge[:, :-1] |= values[:, :-1] != values[:, 1:]
    true_edge[:-1, :] |= values[:-1, :] != values[1:, :]
    sp_edge = np.zeros(labels.shape, dtype=bool)
    sp_edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    sp_edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    hit = 0
    edges = np.argwhere(true_edge)
    for r, c in edges:
        r0, r1 = max(0, r - tolerance), min(labels.shape[0], r + tolerance + 1)
        c0, c1 = max(0, c - tolerance), min(labels.shape[1], c + tolerance + 1)
        if sp_edge[r0:r1, c0:c1].any():
            hit += 1
    return hit / len(edges) if len(edges) else 1.0


class TestEnforceConnectivity:
    def test_fixed_point_on_connected_partition(self):
        sp = enforce_connectivity(QUADRANTS, 0.25, expected_count=4)
        np.testing.assert_array_equal(sp.labels, QUADRANTS)

    def test_stray_pixel_absorbed(self):
        lab = np.zeros((5, 5), dtype=int)
        lab[2, 2] = 1
        sp = enforce_connectivity(lab, 0.25, expected_count=2)
        assert sp.count == 1
        assert np.all(sp.labels == 0)

    def test_checkerboard_merges_to_one(self):
        sp = enforce_connectivity(np.array([[0, 1], [1, 0]]), 1.0, expected_count=2)
        assert sp.count == 1

    def test_splits_disconnected_labels(self):
        lab = np.zeros((3, 9), dtype=int)
        lab[:, 4] = 1
        # label 0 appears on both sides of the stripe: must split
        sp = enforce_connectivity(lab, 0.1, expected_count=3)
        assert sp.count == 3
        assert sp.is_fully_connected()

    def test_randomized_invariants(self):
        rng = np.random.default_rng(23)
        for _ in range(30):
            h, w = rng.integers(3, 15, size=2)
            n = int(rng.integers(1, 6))
            lab = rng.integers(0, n, size=(h, w))
            sp = enforce_connectivity(lab, float(rng.uniform(0.05, 1.0)), expected_count=n)
            assert sp.is_fully_connected()
            assert np.all(sp.sizes() > 0)


class TestOverlapAreas:
    SP = SuperpixelMap(QUADRANTS)

    def test_empty_mask(self):
        areas = overlap_areas(BinaryMask(np.zeros((4, 4), dtype=bool)), self.SP)
        np.testing.assert_array_equal(areas, [0, 0, 0, 0])

    def test_exact_superpixel(self):
        areas = overlap_areas(BinaryMask(QUADRANTS == 0), self.SP)
        np.testing.assert_array_equal(areas, [4, 0, 0, 0])

    def test_top_row(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[0, :] = True
        areas = overlap_areas(BinaryMask(bits), self.SP)
        np.testing.assert_array_equal(areas, [2, 2, 0, 0])

    def test_sums_to_area(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            bits = rng.random((4, 4)) < 0.5
            areas = overlap_areas(BinaryMask(bits), self.SP)
            assert areas.sum() == bits.sum()

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            overlap_areas(BinaryMask(np.zeros((3, 4), dtype=bool)), self.SP)


class TestRgbToLab:
    def test_white_black_and_ranges(self):
        white = rgb_to_lab(np.ones((3, 1, 1)))
        assert white[0, 0, 0] == pytest.approx(100.0, abs=1e-3)
        assert white[1, 0, 0] == pytest.approx(0.0, abs=0.05)
        assert white[2, 0, 0] == pytest.approx(0.0, abs=0.05)
        black = rgb_to_lab(np.zeros((3, 1, 1)))
        assert black[0, 0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_red_reference(self):
        # sRGB red (1,0,0) is about L=53.24, a=80.09, b=67.20 under D65
        red = rgb_to_lab(np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1))
        assert red[0, 0, 0] == pytest.approx(53.24, abs=0.05)
        assert red[1, 0, 0] == pytest.approx(80.09, abs=0.1)
        assert red[2, 0, 0] == pytest.approx(67.20, abs=0.1)


class TestCache:
    def test_cache_hits_by_content(self):
        cache = SuperpixelCache()
        rng = np.random.default_rng(1)
        img = random_image(rng)
        cfg = SlicConfig(target_count=6)
        a = cache.get(img, cfg)
        b = cache.get(FeatureMap(img.values.copy()), cfg)
        assert a is b
        assert len(cache) == 1
        cache.get(img, SlicConfig(target_count=7))
        assert len(cache) == 2


class TestConfigDefaults:
    def test_derived_count(self):
        cfg = SlicConfig()
        assert cfg.resolve_count(20, 20) == 1
        assert cfg.resolve_count(40, 40) == 4

    def test_validation(self):
        with pytest.raises(ValueError):
            SlicConfig(target_count=0)
        with pytest.raises(ValueError):
            SlicConfig(compactness=0.0)
        with pytest.raises(ValueError):
            SlicConfig(iterations=0)
        with pytest.raises(ValueError):
            SlicConfig(min_region_fraction=0.0)
