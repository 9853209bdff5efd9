"""
Tests for the local, object and combined losses, including end-to-end
gradients through a whole scale with the surrogate mask held fixed.
"""
import math

import numpy as np
import pytest

from classifier_attention.attention import AggregatedVolume, local_forward
from classifier_attention.backbone import ToyBackbone
from classifier_attention.config import RunConfig
from classifier_attention.exceptions import RejectedInputError
from classifier_attention.losses import (
    ObjectClassifier,
    local_loss,
    object_features,
    object_features_backward,
    object_loss,
    total_loss,
)
from classifier_attention.multiscale import ScaleModel, sample_gradients, scale_forward
from classifier_attention.tensor import gradient_check, softmax_channel


def volume(probs):
    return AggregatedVolume(probs=probs, winner=np.zeros(probs.shape, dtype=np.int64), n=1)


class TestLocalLoss:

    def test_hand_evaluated(self):
        probs = np.array([[0.5, 0.75], [0.5, 0.25]]).reshape(2, 1, 2)
        result = local_loss(volume(probs), np.array([[1, 0]], dtype=np.uint8), 0.5, 0)
        assert result.l1 == pytest.approx(0.693147, abs=1e-6)
        assert result.l0 == pytest.approx(1.386294, abs=1e-6)
        assert result.loss == pytest.approx(0.519860, abs=1e-6)

    def test_all_foreground_mask_with_full_ratio(self, rng):
        probs = softmax_channel(rng.normal(size=(4, 3, 3)))
        result = local_loss(volume(probs), np.ones((3, 3), dtype=np.uint8), 1.0, 2)
        assert result.l0 == 0.0
        assert result.loss == 0.0

    def test_all_foreground_mask_over_random_volumes(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            categories = int(rng.integers(1, 6))
            h, w = (int(v) for v in rng.integers(1, 7, size=2))
            probs = softmax_channel(rng.normal(scale=3.0, size=(categories + 1, h, w)))
            label = int(rng.integers(0, categories))
            result = local_loss(volume(probs), np.ones((h, w), dtype=np.uint8), 1.0, label)
            assert result.l0 == 0.0
            assert result.loss == 0.0
            assert not np.any(result.grad_probs[-1])

    def test_perfect_predictions(self):
        probs = np.zeros((3, 2, 2))
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        probs[1][mask == 1] = 1.0
        probs[2][mask == 0] = 1.0
        assert local_loss(volume(probs), mask, 0.5, 1).loss == 0.0

    def test_weighted_sum_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            categories = int(rng.integers(1, 5))
            h, w = (int(v) for v in rng.integers(1, 6, size=2))
            probs = softmax_channel(rng.normal(scale=2.0, size=(categories + 1, h, w)))
            mask = (rng.uniform(size=(h, w)) > 0.5).astype(np.uint8)
            ratio = max(mask.mean(), 1.0 / mask.size)
            label = int(rng.integers(0, categories))
            result = local_loss(volume(probs), mask, ratio, label)

            l1 = -sum(math.log(probs[label, i, j]) for i, j in zip(*np.nonzero(mask)))
            l0 = -sum(math.log(probs[-1, i, j]) for i, j in zip(*np.nonzero(mask == 0)))
            assert result.l1 == pytest.approx(l1, rel=1e-12, abs=1e-12)
            assert result.l0 == pytest.approx(l0, rel=1e-12, abs=1e-12)
            assert result.loss == pytest.approx(((1 - ratio) * l1 + ratio * l0) / (h * w), rel=1e-12, abs=1e-12)
            assert result.l0 >= 0 and result.l1 >= 0

    def test_gradient_check(self, rng):
        probs = rng.uniform(0.05, 1.0, size=(4, 3, 3))
        mask = (rng.uniform(size=(3, 3)) > 0.5).astype(np.uint8)
        result = local_loss(volume(probs), mask, 0.4, 1)
        report = gradient_check(
            lambda: local_loss(volume(probs), mask, 0.4, 1).loss,
            {"probs": probs},
            {"probs": result.grad_probs},
        )
        assert report.passed, report

    def test_floored_cells_have_no_gradient(self):
        probs = np.array([0.0, 1.0]).reshape(2, 1, 1)
        result = local_loss(volume(probs), np.ones((1, 1), dtype=np.uint8), 1.0, 0)
        assert math.isfinite(result.l1)
        assert not np.any(result.grad_probs)

    def test_rejects_bad_inputs(self):
        probs = np.full((3, 2, 2), 1 / 3)
        mask = np.ones((2, 2), dtype=np.uint8)
        with pytest.raises(RejectedInputError):
            local_loss(volume(probs), mask, 1.0, 2)
        with pytest.raises(RejectedInputError):
            local_loss(volume(probs), np.ones((2, 3), dtype=np.uint8), 1.0, 0)
        with pytest.raises(RejectedInputError):
            local_loss(volume(probs), mask, 0.0, 0)


class TestObjectFeatures:

    def test_full_mask_is_max_pool(self, rng):
        features = rng.normal(size=(3, 4, 4))
        np.testing.assert_array_equal(
            object_features(features, np.ones((4, 4), dtype=np.uint8)).values,
            features.reshape(3, -1).max(axis=1),
        )

    def test_constant_features(self):
        pooled = object_features(np.full((2, 3, 3), 0.7), np.ones((3, 3), dtype=np.uint8))
        np.testing.assert_array_equal(pooled.values, [0.7, 0.7])

    def test_single_surviving_cell(self, rng):
        features = rng.uniform(size=(5, 3, 4))
        mask = np.zeros((3, 4), dtype=np.uint8)
        mask[2, 1] = 1
        np.testing.assert_array_equal(object_features(features, mask).values, features[:, 2, 1])

    def test_backward_respects_mask(self, rng):
        features = rng.uniform(size=(2, 3, 3))
        mask = np.zeros((3, 3), dtype=np.uint8)
        mask[1, :] = 1
        pooled = object_features(features, mask)
        grad = object_features_backward(pooled, mask, np.ones(2))
        assert not np.any(grad[:, mask == 0])
        assert grad.sum() == 2.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(RejectedInputError):
            object_features(rng.uniform(size=(2, 3, 3)), np.ones((3, 4), dtype=np.uint8))


class TestObjectLoss:

    def test_uniform_logits(self):
        clf = ObjectClassifier(np.zeros((4, 3)), np.zeros(4))
        assert object_loss(np.ones(3), clf, 2).loss == pytest.approx(1.386294, abs=1e-6)

    def test_closed_form(self):
        clf = ObjectClassifier(np.zeros((2, 1)), np.array([0.0, math.log(3.0)]))
        assert object_loss(np.zeros(1), clf, 0).loss == pytest.approx(-math.log(0.25), abs=1e-12)

    def test_saturated(self):
        clf = ObjectClassifier(np.zeros((3, 1)), np.array([0.0, 1000.0, 0.0]))
        assert object_loss(np.zeros(1), clf, 1).loss <= 1e-9

    def test_label_out_of_range(self):
        clf = ObjectClassifier(np.zeros((3, 2)), np.zeros(3))
        with pytest.raises(RejectedInputError):
            object_loss(np.zeros(2), clf, 3)

    def test_gradient_check(self, rng):
        clf = ObjectClassifier.initialize(4, 5, rng)
        feat = rng.uniform(size=5)
        result = object_loss(feat, clf, 3)
        report = gradient_check(
            lambda: object_loss(feat, clf, 3).loss,
            {"weights": clf.weights, "bias": clf.bias, "features": feat},
            {"weights": result.grad_weights, "bias": result.grad_bias, "features": result.grad_features},
        )
        assert report.passed, report


class TestTotalLoss:

    def test_sum(self):
        probs = np.array([[0.5, 0.75], [0.5, 0.25]]).reshape(2, 1, 2)
        loc = local_loss(volume(probs), np.array([[1, 0]], dtype=np.uint8), 0.5, 0)
        obj = object_loss(np.zeros(1), ObjectClassifier(np.zeros((2, 1)), np.array([0.0, math.log(3.0)])), 0)
        breakdown = total_loss(loc, obj)
        assert breakdown.total == pytest.approx(1.906154, abs=1e-6)
        assert breakdown.as_dict()["loss"] == breakdown.total

    def test_zero(self):
        probs = np.zeros((2, 1, 1))
        probs[0] = 1.0
        loc = local_loss(volume(probs), np.ones((1, 1), dtype=np.uint8), 1.0, 0)
        obj = object_loss(np.zeros(1), ObjectClassifier(np.zeros((2, 1)), np.array([1000.0, 0.0])), 0)
        assert total_loss(loc, obj).total == pytest.approx(0.0, abs=1e-12)


def _fixed_mask_loss(model, image, label, mask, ratio, config):
    features, _ = model.backbone.forward(image)
    local = local_forward(features, model.bank, config.aggregate_on)
    loc = local_loss(local.agg, mask, ratio, label)
    obj = object_loss(object_features(features, mask).values, model.object_clf, label)
    return total_loss(loc, obj).total


def _random_scale(seed, config):
    rng = np.random.default_rng(seed)
    model = ScaleModel.initialize(ToyBackbone.initialize((3, 3), rng), config, rng)
    model.bank.bias[:] = rng.normal(scale=0.1, size=model.bank.bias.shape)
    model.object_clf.bias[:] = rng.normal(scale=0.1, size=model.object_clf.bias.shape)
    image = rng.uniform(size=(3, 6, 6))
    label = int(rng.integers(0, config.categories))
    return model, image, label


class TestEndToEndGradients:

    @pytest.mark.parametrize("seed", range(20))
    def test_scale_gradients_match_finite_differences(self, seed):
        config = RunConfig(n_classifiers=2, categories=3, backbone_widths=(3,))
        model, image, label = _random_scale(seed, config)
        artifacts = scale_forward(model, image, config).artifacts
        _, analytic = sample_gradients(model, image, label, config)

        report = gradient_check(
            lambda: _fixed_mask_loss(model, image, label, artifacts.mask, artifacts.foreground_ratio, config),
            model.parameters(),
            analytic,
            step=1e-6,
            tolerance=1e-5,
        )
        assert report.passed, report

    def test_combined_gradient_is_sum_of_branches(self):
        config = RunConfig(n_classifiers=2, categories=3, backbone_widths=(3,))
        model, image, label = _random_scale(99, config)
        _, both = sample_gradients(model, image, label, config)
        _, local_only = sample_gradients(model, image, label, config.replace(loss_terms="local"))
        _, object_only = sample_gradients(model, image, label, config.replace(loss_terms="object"))
        for name in both:
            np.testing.assert_allclose(both[name], local_only[name] + object_only[name], rtol=1e-10, atol=1e-14)
        assert not np.any(local_only["object.weights"])
        assert not np.any(object_only["bank.weights"])
