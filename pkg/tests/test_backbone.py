import math
from dataclasses import replace

import numpy as np
import pytest

from backbone import (BackboneWeights, NonLocalWeights, actor_feature, forward, init_backbone, nonlocal_block,
                      scene_feature, validate_backbone_config)
from config import BackboneConfig, SAMPLING_PRESETS
from geometry import Box
from conftest import TINY_BACKBONE


def nonlocal_oracle(weights, featmap):
    """Double loop over position pairs."""
    x = featmap.reshape(-1, featmap.shape[-1])
    n = x.shape[0]
    out = x.copy()
    scale = 1.0 / math.sqrt(weights.inner_dim)
    for i in range(n):
        logits = np.array([(x[i] @ weights.theta) @ (x[j] @ weights.phi) * scale for j in range(n)])
        attn = np.exp(logits - logits.max())
        attn /= attn.sum()
        y = np.zeros(weights.inner_dim)
        for j in range(n):
            y += attn[j] * (x[j] @ weights.g)
        out[i] += y @ weights.out
    return out.reshape(featmap.shape)


@pytest.fixture(scope="module")
def tiny_weights():
    return init_backbone(TINY_BACKBONE)


class TestInit:
    def test_deterministic(self):
        a, b = init_backbone(TINY_BACKBONE), init_backbone(TINY_BACKBONE)
        assert a.fingerprint == b.fingerprint
        for sa, sb in zip(a.stages, b.stages):
            np.testing.assert_array_equal(sa.kernel, sb.kernel)

    def test_seed_changes_weights(self):
        other = init_backbone(replace(TINY_BACKBONE, seed=TINY_BACKBONE.seed + 1))
        assert other.fingerprint != init_backbone(TINY_BACKBONE).fingerprint

    @pytest.mark.parametrize("changes", [
        {"spatial_strides": (2, 2, 2, 1)},
        {"temporal_strides": (1, 1, 1, 1)},
        {"spatial_strides": (4, 2, 1, 2)},
        {"nonlocal_stage": 4},
        {"dilations": (1, 1, 2)},
    ])
    def test_invalid_configs(self, changes):
        with pytest.raises(ValueError):
            validate_backbone_config(replace(TINY_BACKBONE, **changes))

    def test_named_tensor_round_trip(self, tiny_weights):
        restored = BackboneWeights.from_named_tensors(tiny_weights.to_named_tensors())
        assert restored.config == tiny_weights.config
        assert restored.fingerprint == tiny_weights.fingerprint

    def test_missing_tensor(self, tiny_weights):
        named = tiny_weights.to_named_tensors()
        del named["nonlocal.phi"]
        with pytest.raises(ValueError, match="missing"):
            BackboneWeights.from_named_tensors(named)


class TestNonLocal:
    def test_zero_projection_is_identity(self, rng):
        c, d = 4, 2
        weights = NonLocalWeights(rng.normal(size=(c, d)), rng.normal(size=(c, d)), rng.normal(size=(c, d)),
                                  np.zeros((d, c)))
        x = rng.normal(size=(2, 2, 2, c))
        np.testing.assert_array_equal(nonlocal_block(weights, x), x)

    def test_single_position(self, rng):
        c, d = 4, 2
        weights = NonLocalWeights(*(rng.normal(size=(c, d)) for _ in range(3)), rng.normal(size=(d, c)))
        x = rng.normal(size=(1, 1, 1, c))
        expected = x.reshape(c) + (x.reshape(c) @ weights.g) @ weights.out
        np.testing.assert_allclose(nonlocal_block(weights, x).reshape(c), expected, atol=1e-12)

    def test_matches_pair_oracle(self, rng):
        for _ in range(100):
            c, d = 4, 2
            weights = NonLocalWeights(*(rng.normal(size=(c, d)) for _ in range(3)), rng.normal(size=(d, c)))
            x = rng.normal(size=(2, 2, 2, c))
            np.testing.assert_allclose(nonlocal_block(weights, x), nonlocal_oracle(weights, x), atol=1e-9)

    def test_chunking_does_not_change_result(self, rng, monkeypatch):
        import backbone
        c, d = 4, 2
        weights = NonLocalWeights(*(rng.normal(size=(c, d)) for _ in range(3)), rng.normal(size=(d, c)))
        x = rng.normal(size=(2, 3, 3, c))
        full = nonlocal_block(weights, x)
        monkeypatch.setattr(backbone, "ATTENTION_CHUNK", 5)
        np.testing.assert_allclose(nonlocal_block(weights, x), full, atol=1e-12)


class TestForward:
    def test_desk_scale_shape(self, tiny_weights, rng):
        out = forward(tiny_weights, rng.uniform(size=(8, 32, 32, 3)))
        assert out.shape == (4, 2, 2, TINY_BACKBONE.final_channels)

    def test_random_valid_shapes(self, tiny_weights, rng):
        for _ in range(5):
            t, h, w = 2 * int(rng.integers(1, 4)), 16 * int(rng.integers(1, 3)), 16 * int(rng.integers(1, 3))
            assert forward(tiny_weights, rng.uniform(size=(t, h, w, 3))).shape == (t // 2, h // 16, w // 16, 8)

    @pytest.mark.slow
    @pytest.mark.parametrize("preset", sorted(SAMPLING_PRESETS))
    @pytest.mark.parametrize("crop", [224, 256])
    def test_full_scale_shapes(self, preset, crop):
        weights = init_backbone(BackboneConfig())
        t = SAMPLING_PRESETS[preset].num_frames
        out = forward(weights, np.zeros((t, crop, crop, 3)))
        assert out.shape == (t // 2, crop // 16, crop // 16, 64)

    def test_indivisible_clip_rejected(self, tiny_weights):
        with pytest.raises(ValueError, match="divisible"):
            forward(tiny_weights, np.zeros((3, 32, 32, 3)))
        with pytest.raises(ValueError, match="divisible"):
            forward(tiny_weights, np.zeros((4, 24, 32, 3)))

    def test_bitwise_deterministic(self, tiny_weights, rng):
        clip = rng.uniform(size=(4, 16, 16, 3))
        assert np.array_equal(forward(tiny_weights, clip), forward(tiny_weights, clip))

    def test_local_perturbation_changes_output(self, tiny_weights, rng):
        clip = rng.uniform(size=(4, 32, 32, 3))
        other = clip.copy()
        other[:, 10:14, 10:14] += 0.5
        assert not np.allclose(forward(tiny_weights, clip), forward(tiny_weights, other))


class TestFeatures:
    def test_full_frame_actor_equals_scene(self, tiny_weights, rng):
        clip = rng.uniform(size=(4, 32, 32, 3))
        np.testing.assert_allclose(actor_feature(tiny_weights, clip, Box(0.0, 0.0, 1.0, 1.0), (32, 32)),
                                   scene_feature(tiny_weights, clip), atol=1e-9)

    def test_constant_clip_crop(self, tiny_weights, rng):
        clip = np.full((4, 32, 32, 3), 0.3)
        np.testing.assert_allclose(actor_feature(tiny_weights, clip, Box(0.2, 0.1, 0.6, 0.9), (16, 16)),
                                   scene_feature(tiny_weights, np.full((4, 16, 16, 3), 0.3)), atol=1e-9)

    def test_glyph_changes_actor_feature(self, tiny_weights, rng):
        clip = np.full((4, 32, 32, 3), 0.5)
        marked = clip.copy()
        marked[:, 14:17, 14:17] = rng.uniform(size=(3, 3, 3))
        box = Box(0.3, 0.3, 0.7, 0.7)
        assert not np.allclose(actor_feature(tiny_weights, clip, box, (32, 32)),
                               actor_feature(tiny_weights, marked, box, (32, 32)))

    def test_distinct_constant_clips(self, tiny_weights):
        u = scene_feature(tiny_weights, np.full((4, 16, 16, 3), 0.2))
        v = scene_feature(tiny_weights, np.full((4, 16, 16, 3), 0.8))
        assert u.shape == (8,)
        assert not np.allclose(u, v)
