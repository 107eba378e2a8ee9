import math

import numpy as np
import pytest

from backbone import forward, init_backbone
from config import BackboneConfig
from geometry import (SIZE_BIN_LABELS, SIZE_BIN_NAMES, Box, augment_box, clip_box, crop_resize_clip, expand_box,
                      flip_box, flip_clip, iou, resize_scene_clip, roi_align, roi_pool_3d, size_bin)


def bilinear_oracle(image, y, x):
    """Value at index-space point (y, x): zero beyond one pixel outside, edge-clamped inside that fringe."""
    height, width = image.shape[:2]
    if y < -1.0 or y > height or x < -1.0 or x > width:
        return np.zeros(image.shape[2])
    y = min(max(y, 0.0), height - 1)
    x = min(max(x, 0.0), width - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, height - 1), min(x0 + 1, width - 1)
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * image[y0, x0] + (1 - ly) * lx * image[y0, x1]
            + ly * (1 - lx) * image[y1, x0] + ly * lx * image[y1, x1])


def roi_align_oracle(featmap, box, out_h, out_w, ratio):
    height, width, channels = featmap.shape
    out = np.zeros((out_h, out_w, channels))
    for i in range(out_h):
        for j in range(out_w):
            for a in range(ratio):
                for b in range(ratio):
                    y = (box.y1 + (i + (a + 0.5) / ratio) / out_h * box.height) * height - 0.5
                    x = (box.x1 + (j + (b + 0.5) / ratio) / out_w * box.width) * width - 0.5
                    out[i, j] += bilinear_oracle(featmap, y, x)
    return out / ratio ** 2


def random_box(rng, min_side=0.15):
    x1, y1 = rng.uniform(0.0, 1.0 - min_side, size=2)
    x2 = rng.uniform(x1 + min_side, 1.0)
    y2 = rng.uniform(y1 + min_side, 1.0)
    return Box(x1, y1, x2, y2)


class TestBoxAlgebra:
    def test_box_invariants(self):
        with pytest.raises(ValueError):
            Box(0.5, 0.1, 0.5, 0.2)
        with pytest.raises(ValueError):
            Box(0.1, 0.1, float("inf"), 0.2)

    def test_clip_box(self):
        assert clip_box(Box(-0.2, 0.1, 0.5, 1.3)).as_tuple() == (0.0, 0.1, 0.5, 1.0)
        with pytest.raises(ValueError):
            clip_box(Box(1.1, 0.1, 1.5, 0.2))

    def test_expand_box(self):
        np.testing.assert_allclose(expand_box(Box(0.4, 0.4, 0.6, 0.6), 1.5).as_tuple(), (0.35, 0.35, 0.65, 0.65))
        np.testing.assert_allclose(expand_box(Box(0.0, 0.0, 0.5, 0.5), 2.0).as_tuple(), (0.0, 0.0, 0.75, 0.75))
        box = Box(0.1, 0.2, 0.3, 0.7)
        assert expand_box(box, 1.0) == box
        with pytest.raises(ValueError):
            expand_box(box, 0.9)

    def test_expand_never_shrinks(self, rng):
        for _ in range(50):
            box = random_box(rng)
            out = expand_box(box, float(rng.uniform(1.0, 3.0)))
            assert out.is_normalized()
            assert out.x1 <= box.x1 and out.y1 <= box.y1 and out.x2 >= box.x2 and out.y2 >= box.y2

    def test_flip(self, rng):
        box = Box(0.1, 0.2, 0.4, 0.9)
        np.testing.assert_allclose(flip_box(box).as_tuple(), (0.6, 0.2, 0.9, 0.9))
        np.testing.assert_allclose(flip_box(flip_box(box)).as_tuple(), box.as_tuple())
        clip = rng.normal(size=(2, 3, 4, 3))
        np.testing.assert_array_equal(flip_clip(clip)[:, :, 0], clip[:, :, 3])

    def test_flip_moves_crop_with_content(self, rng):
        clip = rng.normal(size=(1, 8, 8, 3))
        box = Box(0.1, 0.25, 0.5, 0.75)
        np.testing.assert_allclose(crop_resize_clip(flip_clip(clip), flip_box(box), 4, 4),
                                   flip_clip(crop_resize_clip(clip, box, 4, 4)), atol=1e-12)

    def test_augment_box(self, rng):
        box = Box(0.4, 0.4, 0.6, 0.6)
        flips = 0
        for _ in range(200):
            out, flipped = augment_box(box, 1.5, rng)
            flips += flipped
            # symmetric box: flip leaves it in place, scale stays in [1, 1.5]
            assert 0.2 - 1e-12 <= out.width <= 0.3 + 1e-12
        assert 60 < flips < 140
        out, flipped = augment_box(box, 1.0, np.random.default_rng(0))
        assert out.width == pytest.approx(0.2)

    def test_augment_box_deterministic(self):
        box = Box(0.1, 0.2, 0.3, 0.5)
        assert augment_box(box, 2.0, np.random.default_rng(4)) == augment_box(box, 2.0, np.random.default_rng(4))

    def test_iou(self, rng):
        a = Box(0.0, 0.0, 1.0, 0.5)
        b = Box(0.0, 0.0, 0.5, 1.0)
        assert iou(a, a) == 1.0
        assert iou(Box(0.0, 0.0, 0.2, 0.2), Box(0.5, 0.5, 0.9, 0.9)) == 0.0
        assert iou(a, b) == pytest.approx(1.0 / 3.0)
        for _ in range(20):
            p, q = random_box(rng), random_box(rng)
            assert iou(p, q) == pytest.approx(iou(q, p))


class TestSizeBins:
    def test_thresholds(self):
        assert size_bin(Box(0.0, 0.0, 0.1, 1.0)) == "S"
        assert size_bin(Box(0.0, 0.0, 1.0, 1.0)) == "XL"
        assert size_bin(Box(0.0, 0.0, 0.0811, 1.0)) == "XS"
        assert size_bin(Box(0.0, 0.0, 0.0812, 1.0)) == "S"
        assert size_bin(Box(0.0, 0.0, 0.472, 1.0)) == "L"

    def test_labels(self):
        assert SIZE_BIN_NAMES == ("XS", "S", "M", "L", "XL")
        assert SIZE_BIN_LABELS["XS"] == "XS (0, 8.11%]"
        assert SIZE_BIN_LABELS["S"] == "S (8.11%, 17.11%]"
        assert SIZE_BIN_LABELS["M"] == "M (17.11%, 29.24%]"
        assert SIZE_BIN_LABELS["L"] == "L (29.24%, 47.2%]"

    def test_partition(self, rng):
        for area in rng.uniform(1e-6, 1.0, size=200):
            assert size_bin(Box(0.0, 0.0, float(area), 1.0)) in SIZE_BIN_NAMES


class TestCropResize:
    def test_identity_crop(self, rng):
        clip = rng.normal(size=(2, 5, 7, 3))
        np.testing.assert_allclose(crop_resize_clip(clip, Box(0.0, 0.0, 1.0, 1.0), 5, 7), clip, atol=1e-12)

    def test_constant_clip(self, rng):
        clip = np.full((2, 6, 6, 3), 0.37)
        np.testing.assert_allclose(crop_resize_clip(clip, random_box(rng), 5, 3), 0.37, atol=1e-12)

    def test_bilinear_oracle(self, rng):
        clip = rng.normal(size=(2, 8, 8, 3))
        box = Box(0.25, 0.25, 0.75, 0.75)
        out = crop_resize_clip(clip, box, 4, 4)
        for t in range(2):
            np.testing.assert_allclose(out[t], roi_align_oracle(clip[t], box, 4, 4, 1), atol=1e-9)

    def test_random_instances_match_oracle(self, rng):
        for _ in range(100):
            clip = rng.normal(size=(1, int(rng.integers(4, 9)), int(rng.integers(4, 9)), 2))
            box = random_box(rng, min_side=0.3)
            out_h, out_w = (int(v) for v in rng.integers(1, 6, size=2))
            np.testing.assert_allclose(crop_resize_clip(clip, box, out_h, out_w)[0],
                                       roi_align_oracle(clip[0], box, out_h, out_w, 1), atol=1e-9)

    def test_shift_equivariance_and_bounds(self, rng):
        clip = rng.uniform(size=(2, 6, 6, 3))
        box = random_box(rng)
        base = crop_resize_clip(clip, box, 4, 4)
        np.testing.assert_allclose(crop_resize_clip(clip + 2.5, box, 4, 4), base + 2.5, atol=1e-12)
        assert base.min() >= clip.min() - 1e-12 and base.max() <= clip.max() + 1e-12

    def test_rejects_sub_pixel_box(self):
        with pytest.raises(ValueError, match="less than one source pixel"):
            crop_resize_clip(np.ones((1, 8, 8, 3)), Box(0.5, 0.5, 0.55, 0.9), 4, 4)


class TestRoiAlign:
    def test_constant_map(self, rng):
        np.testing.assert_allclose(roi_align(np.full((5, 5, 2), -1.25), random_box(rng), 3, 3), -1.25, atol=1e-12)

    def test_center_of_two_by_two(self):
        featmap = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        out = roi_align(featmap, Box(0.0, 0.0, 1.0, 1.0), 1, 1, sampling_ratio=1)
        assert out[0, 0, 0] == pytest.approx(2.5)

    def test_random_instances_match_oracle(self, rng):
        for _ in range(100):
            featmap = rng.normal(size=(5, 5, 2))
            box = random_box(rng, min_side=0.05)
            np.testing.assert_allclose(roi_align(featmap, box, 3, 3, 2), roi_align_oracle(featmap, box, 3, 3, 2),
                                       atol=1e-9)

    def test_fringe_is_clamped_and_far_points_vanish(self):
        featmap = np.full((4, 4, 1), 2.0)
        # the sample point lands half a pixel outside the map
        out = roi_align(featmap, Box(-0.25, 0.0, 0.0, 1.0), 1, 1, sampling_ratio=1)
        assert out[0, 0, 0] == pytest.approx(2.0)
        far = roi_align(featmap, Box(-1.0, 0.0, -0.5, 1.0), 1, 1, sampling_ratio=1)
        assert far[0, 0, 0] == 0.0

    def test_shift_equivariance(self, rng):
        featmap = rng.normal(size=(6, 6, 3))
        box = random_box(rng)
        np.testing.assert_allclose(roi_align(featmap + 4.0, box, 3, 3), roi_align(featmap, box, 3, 3) + 4.0,
                                   atol=1e-12)


class TestRoiPool3d:
    def test_constant_and_temporal_mean(self, rng):
        np.testing.assert_allclose(roi_pool_3d(np.full((2, 4, 4, 3), 0.5), random_box(rng)), 0.5, atol=1e-12)
        featmap = np.stack([np.full((4, 4, 3), 1.0), np.full((4, 4, 3), 3.0)])
        np.testing.assert_allclose(roi_pool_3d(featmap, random_box(rng)), 2.0, atol=1e-12)

    def test_composed_oracle(self, rng):
        featmap = rng.normal(size=(2, 6, 6, 3))
        box = random_box(rng)
        expected = roi_align_oracle(featmap.mean(axis=0), box, 7, 7, 2).max(axis=(0, 1))
        np.testing.assert_allclose(roi_pool_3d(featmap, box, (7, 7)), expected, atol=1e-9)

    def test_monotone(self, rng):
        featmap = rng.normal(size=(2, 5, 5, 3))
        box = random_box(rng)
        bumped = featmap + rng.uniform(0.0, 1.0, size=featmap.shape)
        assert np.all(roi_pool_3d(bumped, box) >= roi_pool_3d(featmap, box) - 1e-12)


class TestResolution:
    def test_sub_cell_shift_invisible_to_roi_pool_but_not_to_crop(self):
        """A glyph that stays off the stride-16 sample grid never reaches the backbone map."""
        weights = init_backbone(BackboneConfig(stage_channels=(4, 4, 8, 8), nonlocal_stage=2,
                                               kernel_size=(1, 1, 1), seed=3))

        def clip_with_glyph(top, left):
            clip = np.zeros((2, 64, 64, 3))
            clip[:, top:top + 3, left:left + 3] = 1.0
            return clip

        a, b = clip_with_glyph(18, 18), clip_with_glyph(26, 26)
        box = Box(16 / 64, 16 / 64, 32 / 64, 32 / 64)
        map_a, map_b = forward(weights, a), forward(weights, b)
        assert map_a.shape == (1, 4, 4, 8)
        np.testing.assert_array_equal(map_a, map_b)
        np.testing.assert_array_equal(roi_pool_3d(map_a, box), roi_pool_3d(map_b, box))

        crop_a = crop_resize_clip(a, box, 64, 64)
        crop_b = crop_resize_clip(b, box, 64, 64)
        assert np.abs(crop_a - crop_b).max() > 0.5
        assert not np.allclose(forward(weights, crop_a), forward(weights, crop_b))


class TestSceneResize:
    def test_square_passthrough(self, rng):
        clip = rng.uniform(size=(2, 16, 16, 3))
        np.testing.assert_array_equal(resize_scene_clip(clip, 16), clip)

    def test_short_side_keeps_whole_frame(self, rng):
        clip = rng.uniform(size=(2, 20, 40, 3))
        assert resize_scene_clip(clip, 32).shape == (2, 32, 64, 3)

    def test_long_side_rounds_to_multiple(self, rng):
        clip = rng.uniform(size=(1, 30, 50, 3))
        assert resize_scene_clip(clip, 32).shape == (1, 32, 48, 3)
        assert resize_scene_clip(clip, 32, multiple=1).shape == (1, 32, 53, 3)

    def test_center_crop(self, rng):
        clip = rng.uniform(size=(2, 20, 40, 3))
        assert resize_scene_clip(clip, 32, center_crop=True).shape == (2, 32, 32, 3)
        stripes = np.zeros((1, 16, 48, 3))
        stripes[:, :, 16:32] = 1.0
        np.testing.assert_array_equal(resize_scene_clip(stripes, 16, center_crop=True), np.ones((1, 16, 16, 3)))

    def test_constant_stays_constant(self):
        out = resize_scene_clip(np.full((1, 24, 36, 3), 0.25), 16)
        np.testing.assert_allclose(out, 0.25, atol=1e-9)
