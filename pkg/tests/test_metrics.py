"""
Tests for SSIM, PSNR, accuracy, the gradient-sensitivity probe and feature distance.
"""
import math

import numpy as np
import pytest
import sys
import os

import torch
import torch.nn as nn

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from classifier import Architecture, ClassifierModel
from datasets import LabeledDataset
from exceptions import ArgumentError, EmptyDatasetError, UnsupportedShapeError
from metrics import (
    MetricReport,
    accuracy,
    augment_for_probe,
    feature_distance,
    grad_sensitivity_probe,
    psnr,
    psnr_batch,
    ssim,
    ssim_batch,
    ssim_map,
)
from seeding import make_generator


def _random_images(n=2, side=12, seed=0):
    return torch.rand(n, 1, side, side, generator=make_generator(seed), dtype=torch.float64)


class _Constant:
    """Predictor returning one-hot logits for a fixed class."""

    def __init__(self, label, class_count):
        self.label, self.class_count = label, class_count

    def __call__(self, x):
        out = torch.zeros(x.shape[0], self.class_count)
        out[:, self.label] = 1.0
        return out


class TestSSIM:
    """Test the Gaussian-window SSIM"""

    def test_identity(self):
        """Test that ssim(x, x) is 1"""
        x = _random_images()
        assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-12)

    def test_constant_closed_form(self):
        """Test the zero-variance closed form for constant images"""
        a = torch.ones(1, 1, 12, 12, dtype=torch.float64)
        b = torch.zeros(1, 1, 12, 12, dtype=torch.float64)
        expected = 1e-4 / (1 + 1e-4)
        assert torch.allclose(ssim_map(a, b), torch.full((1, 1, 12, 12), expected, dtype=torch.float64))
        assert float(ssim(a, b)) == pytest.approx(expected, rel=1e-9)

    def test_symmetric(self):
        """Test that ssim is symmetric"""
        for seed in range(5):
            a, b = _random_images(seed=seed), _random_images(seed=seed + 100)
            assert abs(float(ssim(a, b)) - float(ssim(b, a))) < 1e-12

    def test_range(self):
        """Test that SSIM lies in (-1, 1]"""
        values = ssim_batch(_random_images(4, seed=1), _random_images(4, seed=2))
        assert torch.all(values > -1) and torch.all(values <= 1)

    def test_accepts_single_images(self):
        """Test that (H, W) and (1, H, W) inputs are accepted"""
        x = _random_images(1)
        assert float(ssim(x[0], x[0])) == pytest.approx(1.0)
        assert float(ssim(x[0, 0], x[0, 0])) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        """Test that mismatched shapes raise ArgumentError"""
        with pytest.raises(ArgumentError, match="Shape mismatch"):
            ssim(_random_images(1, 12), _random_images(1, 13))

    def test_color_rejected(self):
        """Test that multi-channel images are unsupported"""
        with pytest.raises(UnsupportedShapeError):
            ssim(torch.zeros(1, 3, 12, 12), torch.zeros(1, 3, 12, 12))

    def test_gradient_matches_finite_differences(self):
        """Test that d ssim / d b agrees with central differences"""
        a, b = _random_images(1, 12, seed=3), _random_images(1, 12, seed=4)
        b = b.clone().requires_grad_(True)
        grad, = torch.autograd.grad(ssim(a, b), b)
        h = 1e-5
        worst = 0.0
        for index in [(0, 0, 0, 0), (0, 0, 5, 7), (0, 0, 11, 11), (0, 0, 3, 2)]:
            step = torch.zeros_like(b)
            step[index] = h
            with torch.no_grad():
                fd = (ssim(a, b + step) - ssim(a, b - step)) / (2 * h)
            worst = max(worst, abs(float(grad[index]) - float(fd)) / max(abs(float(fd)), 1e-8))
        assert worst < 1e-3


class TestPSNR:
    """Test PSNR with the 99 dB cap"""

    def test_unit_mse(self):
        """Test that MSE 1 gives 0 dB"""
        assert psnr(torch.ones(4, 4), torch.zeros(4, 4)) == pytest.approx(0.0)

    def test_identical(self):
        """Test that identical images return the cap"""
        x = _random_images(1)
        assert psnr(x, x) == 99.0

    def test_mse_hundredth(self):
        """Test that MSE 0.01 gives 20 dB"""
        assert psnr(torch.full((8, 8), 0.1, dtype=torch.float64), torch.zeros(8, 8)) == pytest.approx(20.0)

    def test_batch(self):
        """Test per-image PSNR values"""
        a = torch.zeros(2, 1, 4, 4)
        b = torch.stack([torch.zeros(1, 4, 4), torch.full((1, 4, 4), 0.1)])
        assert torch.allclose(psnr_batch(a, b), torch.tensor([99.0, 20.0], dtype=torch.float64))

    def test_shape_mismatch(self):
        """Test that mismatched shapes raise ArgumentError"""
        with pytest.raises(ArgumentError):
            psnr(torch.zeros(2, 2), torch.zeros(3, 3))


class TestAccuracy:
    """Test argmax accuracy"""

    def test_constant_single_class(self):
        """Test that a constant classifier is perfect on its own class"""
        data = LabeledDataset(torch.zeros(6, 2), torch.full((6,), 1), 3)
        assert accuracy(_Constant(1, 3), data) == 1.0

    def test_constant_balanced(self):
        """Test that a constant classifier scores 1/C on balanced data"""
        data = LabeledDataset(torch.zeros(12, 2), torch.arange(4).repeat(3), 4)
        assert accuracy(_Constant(2, 4), data) == 0.25

    def test_manual_count(self):
        """Test against a by-hand count on ten samples"""
        labels = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
        predictions = torch.tensor([0, 1, 1, 0, 2, 2, 0, 0, 2, 1])

        def predictor(x):
            return predictions[x[:, 0].long()]

        data = LabeledDataset(torch.arange(10, dtype=torch.float32).view(-1, 1).repeat(1, 2), labels, 3)
        assert accuracy(predictor, data, batch_size=3) == pytest.approx(0.6)

    def test_permutation_invariant(self, mixture_small, point_classifier):
        """Test that accuracy does not depend on sample order"""
        order = torch.randperm(len(mixture_small), generator=make_generator(0))
        shuffled = LabeledDataset(mixture_small.samples[order].double(), mixture_small.labels[order], 4)
        data = LabeledDataset(mixture_small.samples.double(), mixture_small.labels, 4)
        assert accuracy(point_classifier, shuffled) == accuracy(point_classifier, data)


class TestMetricReport:
    """Test per-sample metric reports"""

    def test_consistent_summary(self):
        """Test that mean and std match the per-sample values"""
        report = MetricReport.from_values('psnr', [1.0, 2.0, 4.0])
        assert report.mean == pytest.approx(np.mean([1.0, 2.0, 4.0]), abs=1e-9)
        assert report.std == pytest.approx(np.std([1.0, 2.0, 4.0]), abs=1e-9)
        assert report.to_record(model='m')['n'] == 3

    def test_empty(self):
        """Test that a report needs values"""
        with pytest.raises(ArgumentError):
            MetricReport.from_values('ssim', [])


class TestGradSensitivityProbe:
    """Test the gradient-norm chain probe"""

    def _probe_model(self):
        # logits depend on the first coordinate only
        network = nn.Sequential(nn.Flatten(), nn.Linear(2, 3)).double()
        with torch.no_grad():
            network[1].weight.copy_(torch.tensor([[1.0, 0.0], [-0.5, 0.0], [0.25, 0.0]]))
            network[1].bias.zero_()
        return ClassifierModel(Architecture.MLP, network, 3, (2,))

    def test_linear_model_equal_means(self):
        """Test that a linear softmax model gives equal means when sets differ off its weights"""
        model = self._probe_model()
        generator = make_generator(0)
        base = torch.randn(20, 2, generator=generator, dtype=torch.float64)
        labels = torch.randint(0, 3, (20,), generator=generator)
        sets = []
        for shift in (0.0, 0.3, 1.0):
            x = base.clone()
            x[:, 1] += shift
            sets.append(LabeledDataset(x, labels, 3))
        report = grad_sensitivity_probe(model, *sets)
        assert report.clean_mean == pytest.approx(report.augmented_mean, rel=1e-12)
        assert report.clean_mean == pytest.approx(report.adversarial_mean, rel=1e-12)
        assert report.n == 20
        assert report.clean_mean >= 0

    def test_misaligned(self, mixture_small, point_classifier):
        """Test that sets of different sizes are rejected"""
        data = LabeledDataset(mixture_small.samples.double(), mixture_small.labels, 4)
        with pytest.raises(ArgumentError, match="aligned"):
            grad_sensitivity_probe(point_classifier, data, data, data.subset(10))

    def test_labels_must_match(self, point_classifier):
        """Test that sets with different labels are rejected"""
        a = LabeledDataset(torch.zeros(2, 2, dtype=torch.float64), torch.tensor([0, 1]), 4)
        b = LabeledDataset(torch.zeros(2, 2, dtype=torch.float64), torch.tensor([1, 0]), 4)
        with pytest.raises(ArgumentError, match="share labels"):
            grad_sensitivity_probe(point_classifier, a, a, b)

    def test_augment_shape_and_range(self, shapes_small):
        """Test that augmentation keeps shapes, labels and the image range"""
        augmented = augment_for_probe(shapes_small, 8 / 255, seed=0)
        assert augmented.samples.shape == shapes_small.samples.shape
        assert torch.equal(augmented.labels, shapes_small.labels)
        assert float(augmented.samples.min()) >= 0 and float(augmented.samples.max()) <= 1


class TestFeatureDistance:
    """Test the penultimate-feature distance diagnostic"""

    def test_zero_for_identical(self, image_classifier, shapes_small):
        """Test that identical inputs are at distance zero"""
        x = shapes_small.samples.double()
        report = feature_distance(image_classifier, x, x)
        assert report.name == 'classifier_feature_distance_not_lpips'
        assert report.mean == 0.0

    def test_positive_for_different(self, image_classifier, shapes_small):
        """Test that different inputs have positive distance"""
        x = shapes_small.samples.double()
        assert feature_distance(image_classifier, x, 1 - x).mean > 0
