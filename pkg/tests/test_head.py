import math
from dataclasses import replace

import numpy as np
import pytest

from config import HEAD_PRESETS, HeadConfig
from head import (ClassifierParams, FeatureScaler, accuracy, classify, fuse, loss_and_grad, lr_at,
                  restrict_to_actor, train_classifier, zero_params)


def numeric_grad(params, fused, labels, h=1e-5):
    gw = np.zeros_like(params.weights)
    gb = np.zeros_like(params.bias)
    for idx in np.ndindex(params.weights.shape):
        plus, minus = params.weights.copy(), params.weights.copy()
        plus[idx] += h
        minus[idx] -= h
        gw[idx] = (loss_and_grad(replace(params, weights=plus), fused, labels)[0]
                   - loss_and_grad(replace(params, weights=minus), fused, labels)[0]) / (2 * h)
    for k in range(len(params.bias)):
        plus, minus = params.bias.copy(), params.bias.copy()
        plus[k] += h
        minus[k] -= h
        gb[k] = (loss_and_grad(replace(params, bias=plus), fused, labels)[0]
                 - loss_and_grad(replace(params, bias=minus), fused, labels)[0]) / (2 * h)
    return gw, gb


def relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6))


class TestFuse:
    def test_dimensions(self, rng):
        actor, scene, lt = rng.normal(size=64), rng.normal(size=64), rng.normal(size=512)
        fused = fuse(actor, scene, lt, dims=(64, 64, 512))
        assert fused.shape == (640,)
        np.testing.assert_array_equal(fused, np.concatenate([actor, scene, lt]))
        assert fuse(rng.normal(size=2048), rng.normal(size=2048), rng.normal(size=512)).shape == (4608,)

    def test_actor_only_identity(self, rng):
        actor = rng.normal(size=8)
        np.testing.assert_array_equal(fuse(actor), actor)

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError, match="scene"):
            fuse(rng.normal(size=8), rng.normal(size=7), dims=(8, 8, None))
        with pytest.raises(ValueError, match="actor"):
            fuse(None)


class TestClassify:
    def test_zero_params(self):
        np.testing.assert_array_equal(classify(zero_params(3, 5), np.ones(5)), np.full(3, 0.5))
        np.testing.assert_allclose(classify(zero_params(4, 5, "singlelabel"), np.ones(5)), np.full(4, 0.25))

    def test_direct_formula(self, rng):
        params = ClassifierParams(rng.normal(size=(3, 6)), rng.normal(size=3))
        x = rng.normal(size=6)
        z = params.weights @ x + params.bias
        np.testing.assert_allclose(classify(params, x), 1.0 / (1.0 + np.exp(-z)), atol=1e-12)
        soft = replace(params, mode="singlelabel")
        np.testing.assert_allclose(classify(soft, x), np.exp(z) / np.exp(z).sum(), atol=1e-12)

    def test_probability_ranges(self, rng):
        params = ClassifierParams(rng.normal(size=(5, 4)), rng.normal(size=5), "singlelabel")
        batch = rng.normal(size=(10, 4))
        np.testing.assert_allclose(classify(params, batch).sum(axis=1), 1.0, atol=1e-9)
        scores = classify(replace(params, mode="multilabel"), batch)
        assert np.all((scores > 0.0) & (scores < 1.0))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            classify(zero_params(2, 4), np.ones(5))

    def test_mode_validated(self):
        with pytest.raises(ValueError):
            ClassifierParams(np.zeros((2, 2)), np.zeros(2), "ranking")


class TestLoss:
    def test_zero_params_bce_is_ln2(self, rng):
        loss, _ = loss_and_grad(zero_params(4, 3), rng.normal(size=3), [0, 2])
        assert loss == pytest.approx(math.log(2.0))

    def test_confident_prediction(self):
        params = ClassifierParams(np.zeros((2, 1)), np.array([25.0, -25.0]))
        assert loss_and_grad(params, np.ones(1), [0])[0] < 1e-6
        soft = ClassifierParams(np.zeros((2, 1)), np.array([25.0, -25.0]), "singlelabel")
        assert loss_and_grad(soft, np.ones(1), 0)[0] < 1e-6

    @pytest.mark.parametrize("mode", ["multilabel", "singlelabel"])
    def test_gradient_check(self, rng, mode):
        worst = 0.0
        for _ in range(100):
            k, d = int(rng.integers(2, 5)), int(rng.integers(1, 5))
            params = ClassifierParams(rng.normal(size=(k, d)), rng.normal(size=k), mode)
            x = rng.normal(size=d)
            if mode == "multilabel":
                labels = [c for c in range(k) if rng.random() < 0.4]
            else:
                labels = int(rng.integers(k))
            _, grad = loss_and_grad(params, x, labels)
            gw, gb = numeric_grad(params, x, labels)
            worst = max(worst, relative_error(grad.weights, gw), relative_error(grad.bias, gb))
        assert worst <= 1e-4

    def test_class_permutation_invariance(self, rng):
        params = ClassifierParams(rng.normal(size=(4, 3)), rng.normal(size=4))
        x = rng.normal(size=3)
        perm = np.array([2, 0, 3, 1])
        inverse = {int(old): new for new, old in enumerate(perm)}
        permuted = ClassifierParams(params.weights[perm], params.bias[perm])
        base = loss_and_grad(params, x, [1, 3])[0]
        assert loss_and_grad(permuted, x, [inverse[1], inverse[3]])[0] == pytest.approx(base, abs=1e-12)

    def test_singlelabel_needs_one_label(self):
        with pytest.raises(ValueError, match="exactly one"):
            loss_and_grad(zero_params(3, 2, "singlelabel"), np.ones(2), [0, 1])


class TestTraining:
    def test_presets(self):
        assert HeadConfig().dropout == 0.3 and HeadConfig().weight_decay == 1e-6
        assert HEAD_PRESETS["jhmdb"].mode == "singlelabel"
        assert HEAD_PRESETS["jhmdb"].dropout == 0.5 and HEAD_PRESETS["jhmdb"].weight_decay == 1e-7

    @pytest.mark.parametrize("mode", ["multilabel", "singlelabel"])
    def test_separable_toy_set(self, rng, mode):
        xs = np.concatenate([rng.normal(-2.0, 0.5, size=(20, 2)), rng.normal(2.0, 0.5, size=(20, 2))])
        ys = [0] * 20 + [1] * 20
        labels = ys if mode == "singlelabel" else [[y] for y in ys]
        dataset = list(zip(xs, labels))
        params = train_classifier(dataset, HeadConfig(mode=mode, iters=500, dropout=0.0))
        assert accuracy(params, dataset) == 1.0

    def test_zero_lr_keeps_zero_params(self, rng):
        dataset = [(rng.normal(size=3), [0]) for _ in range(5)]
        params = train_classifier(dataset, HeadConfig(lr=0.0, iters=10), num_classes=2)
        assert not params.weights.any() and not params.bias.any()

    def test_deterministic(self, rng):
        dataset = [(rng.normal(size=3), [int(rng.integers(3))]) for _ in range(30)]
        hyper = HeadConfig(iters=50)
        a, b = train_classifier(dataset, hyper, 3), train_classifier(dataset, hyper, 3)
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)

    def test_background_rows_allowed(self, rng):
        dataset = [(rng.normal(size=3), []) for _ in range(5)] + [(rng.normal(size=3), [1])]
        params = train_classifier(dataset, HeadConfig(iters=5), num_classes=3)
        assert params.weights.shape == (3, 3)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_classifier([], HeadConfig())

    def test_lr_schedule(self):
        hyper = HeadConfig(lr=1.0, warmup_iters=10, warmup_factor=0.1, lr_steps=(20, 30), lr_decay=0.1)
        assert lr_at(0, hyper) == pytest.approx(0.1)
        assert lr_at(5, hyper) == pytest.approx(0.55)
        assert lr_at(10, hyper) == pytest.approx(1.0)
        assert lr_at(25, hyper) == pytest.approx(0.1)
        assert lr_at(35, hyper) == pytest.approx(0.01)
        assert lr_at(123, HeadConfig(lr=0.3)) == 0.3


class TestHelpers:
    def test_scaler(self, rng):
        x = rng.normal(3.0, 2.0, size=(50, 4))
        x[:, 2] = 7.0
        scaler = FeatureScaler.fit(x)
        scaled = scaler(x)
        np.testing.assert_allclose(scaled.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(scaled[:, [0, 1, 3]].std(axis=0), 1.0, atol=1e-12)
        np.testing.assert_array_equal(scaled[:, 2], 0.0)

    def test_restrict_to_actor_preserves_ranking(self, rng):
        params = ClassifierParams(rng.normal(size=(3, 10)), rng.normal(size=3))
        restricted = restrict_to_actor(params, 4)
        actor_only = ClassifierParams(params.weights[:, :4], params.bias)
        fused = rng.normal(size=(6, 10))
        np.testing.assert_allclose(classify(restricted, fused), classify(actor_only, fused[:, :4]), atol=1e-12)
