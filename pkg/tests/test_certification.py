"""
Tests for randomized smoothing, the certified radii and the gamma(t*) helper.
"""
import math
from decimal import Decimal, getcontext
from statistics import NormalDist

import numpy as np
import pytest
import sys
import os

import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from certification import (
    ABSTAIN,
    CertificateRecord,
    ExtendedRadiusParams,
    certify,
    cohen_radius,
    extended_radius,
    gamma_from_alpha_bar,
    gamma_from_schedule,
    lower_confidence_bound,
    perturbation_stability,
    smooth_classify,
    smooth_predict,
)
from classifier import build_classifier
from diffusion import default_schedule
from exceptions import ArgumentError

_PHI_INV = NormalDist().inv_cdf


def constant(label):
    return lambda x: torch.full((x.shape[0],), label, dtype=torch.int64)


def threshold(x):
    return (x.flatten(1)[:, 0] > 0).to(torch.int64)


def _extended_oracle(delta, gamma, c_alpha, c_s, p_a, p_b):
    getcontext().prec = 50
    two_gamma = Decimal(repr(2 * gamma))
    prefactor = (Decimal(repr(delta)) + (two_gamma.exp() - 1).sqrt() * Decimal(repr(c_alpha))
                 + Decimal(repr(gamma)) * Decimal(repr(c_s))) / 2
    gap = Decimal(repr(_PHI_INV(p_a))) - Decimal(repr(_PHI_INV(p_b)))
    return float(prefactor * gap)


class TestSmoothPredict:
    """Test the Monte-Carlo class histogram"""

    def test_zero_sigma(self, point_classifier):
        """Test that sigma = 0 puts every vote on the plain prediction"""
        x = torch.tensor([[0.3, -0.2]], dtype=torch.float64)
        label = int(point_classifier(x).argmax(dim=1))
        counts = smooth_predict(point_classifier, x, 0.0, 50, seed=0)
        assert counts[label] == 50
        assert counts.sum() == 50

    def test_constant_pipeline(self):
        """Test that a constant pipeline gets every vote"""
        counts = smooth_predict(constant(2), torch.zeros(2), 0.5, 300, seed=0, num_classes=4)
        assert counts.tolist() == [0, 0, 300, 0]

    def test_boundary_split(self):
        """Test the 50/50 split of a threshold classifier at its boundary"""
        n = 10_000
        counts = smooth_predict(threshold, torch.zeros(2), 1.0, n, seed=1, num_classes=2)
        assert abs(counts[1] / n - 0.5) <= 4 * math.sqrt(0.25 / n)

    def test_deterministic_and_batched(self):
        """Test determinism per seed and independence from the leading batch axis"""
        a = smooth_predict(threshold, torch.zeros(2), 1.0, 777, seed=3, num_classes=2)
        b = smooth_predict(threshold, torch.zeros(1, 2), 1.0, 777, seed=3, num_classes=2)
        assert np.array_equal(a, b)
        assert a.sum() == 777

    def test_needs_class_count(self):
        """Test that plain callables must name their class count"""
        with pytest.raises(ArgumentError, match="num_classes"):
            smooth_predict(threshold, torch.zeros(2), 1.0, 10, seed=0)

    @pytest.mark.parametrize("sigma,n", [(-0.1, 10), (0.5, 0)])
    def test_invalid(self, sigma, n):
        """Test that negative sigma and empty sampling are rejected"""
        with pytest.raises(ArgumentError):
            smooth_predict(threshold, torch.zeros(2), sigma, n, seed=0, num_classes=2)


class TestSmoothClassify:
    """Test the abstaining smoothed prediction"""

    def test_constant(self):
        """Test that a constant pipeline is classified"""
        label, counts = smooth_classify(constant(1), torch.zeros(2), 0.5, 100, 0.01, seed=0, num_classes=3)
        assert label == 1
        assert counts[1] == 100

    def test_boundary_abstains(self):
        """Test that a tie at the boundary abstains"""
        label, _ = smooth_classify(threshold, torch.zeros(2), 1.0, 200, 0.001, seed=0, num_classes=2)
        assert label == ABSTAIN


class TestCohenRadius:
    """Test (sigma / 2) * (Phi^-1(p_A) - Phi^-1(p_B))"""

    def test_reference_value(self):
        """Test sigma = 0.5, p_A = 0.99, p_B = 0.01"""
        assert cohen_radius(0.5, 0.99, 0.01) == pytest.approx(1.16316, abs=1e-5)

    def test_quantile_oracle_grid(self):
        """Test against an independent quantile oracle on a 20-point grid"""
        for sigma in (0.12, 0.25, 0.5, 1.0):
            for p_a, p_b in ((0.6, 0.4), (0.75, 0.1), (0.9, 0.05), (0.99, 0.01), (0.999, 0.0005)):
                expected = sigma / 2 * (_PHI_INV(p_a) - _PHI_INV(p_b))
                assert abs(cohen_radius(sigma, p_a, p_b) - expected) < 1e-9

    def test_equal_probabilities(self):
        """Test that p_A == p_B gives exactly zero"""
        assert cohen_radius(0.5, 0.5, 0.5) == 0.0
        assert cohen_radius(0.5, 0.7, 0.7) == 0.0

    def test_monotone_and_linear(self):
        """Test that the radius grows with p_A and scales linearly with sigma"""
        radii = [cohen_radius(0.25, p, 0.05) for p in (0.6, 0.7, 0.8, 0.9, 0.99)]
        assert all(b > a for a, b in zip(radii, radii[1:]))
        assert cohen_radius(0.5, 0.9, 0.1) == pytest.approx(2 * cohen_radius(0.25, 0.9, 0.1), rel=1e-12)

    def test_clamped_at_one(self):
        """Test that p_A = 1 is evaluated at 1 - 1e-12 rather than infinity"""
        radius = cohen_radius(1.0, 1.0, 0.0)
        assert math.isfinite(radius)
        assert radius == pytest.approx(-_PHI_INV(1e-12), rel=1e-5)

    def test_invalid(self):
        """Test that p_A < p_B and out-of-range probabilities are rejected"""
        with pytest.raises(ArgumentError, match="smaller"):
            cohen_radius(0.5, 0.3, 0.6)
        with pytest.raises(ArgumentError, match=r"\[0, 1\]"):
            cohen_radius(0.5, 1.2, 0.1)


class TestExtendedRadius:
    """Test the radius of the diffusion-prefixed classifier"""

    def test_reference_tuple(self):
        """Test delta = 0.1, gamma = 0.2, C = 1, p_A = 0.9, p_B = 0.1"""
        params = ExtendedRadiusParams(0.1, 0.2, 1.0, 1.0)
        prefactor = (0.1 + math.sqrt(math.exp(0.4) - 1) + 0.2) / 2
        expected = prefactor * 2 * _PHI_INV(0.9)
        assert extended_radius(params, 0.9, 0.1) == pytest.approx(expected, abs=1e-9)

    def test_high_precision_oracle(self):
        """Test ten parameter tuples against a high-precision evaluation"""
        tuples = [
            (0.0, 0.1, 1.0, 1.0, 0.8, 0.2),
            (0.1, 0.2, 1.0, 1.0, 0.9, 0.1),
            (0.05, 0.5, 0.5, 2.0, 0.95, 0.05),
            (0.3, 1.0, 1.0, 0.0, 0.7, 0.3),
            (0.0, 0.01, 1.0, 1.0, 0.99, 0.01),
            (1.0, 0.0, 1.0, 1.0, 0.6, 0.4),
            (0.2, 2.0, 0.1, 0.1, 0.85, 0.15),
            (0.01, 0.3, 3.0, 1.0, 0.999, 0.001),
            (0.5, 0.05, 0.0, 1.0, 0.75, 0.2),
            (0.0, 0.7, 1.0, 0.5, 0.55, 0.45),
        ]
        for delta, gamma, c_alpha, c_s, p_a, p_b in tuples:
            params = ExtendedRadiusParams(delta, gamma, c_alpha, c_s)
            expected = _extended_oracle(delta, gamma, c_alpha, c_s, p_a, p_b)
            assert abs(extended_radius(params, p_a, p_b) - expected) < 1e-9

    def test_zero_cases(self):
        """Test zero prefactor and equal probabilities"""
        assert extended_radius(ExtendedRadiusParams(0.0, 0.0), 0.9, 0.1) == 0.0
        assert extended_radius(ExtendedRadiusParams(0.3, 0.4), 0.6, 0.6) == 0.0

    def test_matches_cohen_at_sigma_prefactor(self):
        """Test that delta = sigma with gamma = 0 reproduces the Cohen radius"""
        assert extended_radius(ExtendedRadiusParams(0.25, 0.0), 0.9, 0.05) == pytest.approx(
            cohen_radius(0.25, 0.9, 0.05), rel=1e-12)

    def test_negative_parameters(self):
        """Test that all parameters must be nonnegative"""
        with pytest.raises(ArgumentError, match="gamma_tstar"):
            ExtendedRadiusParams(0.1, -0.2)

    def test_p_a_below_p_b(self):
        """Test that p_A < p_B is rejected"""
        with pytest.raises(ArgumentError):
            extended_radius(ExtendedRadiusParams(0.1, 0.2), 0.2, 0.8)


class TestGamma:
    """Test gamma(t*) = -1/2 ln(alpha_bar_t*)"""

    def test_closed_forms(self):
        """Test alpha_bar = 1 and alpha_bar = e^-2"""
        assert gamma_from_alpha_bar(1.0) == 0.0
        assert gamma_from_alpha_bar(math.exp(-2)) == pytest.approx(1.0, abs=1e-15)

    def test_default_schedule(self):
        """Test t* = 60 on the default schedule"""
        schedule = default_schedule()
        assert gamma_from_schedule(schedule, 60) == pytest.approx(-0.5 * math.log(float(schedule.alpha_bar[59])))

    def test_out_of_range(self):
        """Test that steps outside [1, T] are rejected"""
        with pytest.raises(ArgumentError):
            gamma_from_schedule(default_schedule(), 0)
        with pytest.raises(ArgumentError):
            gamma_from_alpha_bar(0.0)

    def test_params_from_schedule(self):
        """Test building extended-radius parameters from a schedule"""
        params = ExtendedRadiusParams.from_schedule(default_schedule(), 60, delta=0.1)
        assert params.gamma_tstar == gamma_from_schedule(default_schedule(), 60)
        assert params.delta == 0.1


class TestCertify:
    """Test certification of a single input"""

    def test_constant_pipeline_bound(self):
        """Test that 1000/1000 votes give the exact one-sided binomial bound"""
        record = certify(constant(2), torch.zeros(2), 0.25, 100, 1000, 0.01, seed=0, num_classes=3)
        assert record.prediction == 2
        assert record.p_a_lower == pytest.approx(0.01 ** (1 / 1000), abs=1e-9)
        assert record.p_b_upper == pytest.approx(1 - record.p_a_lower)
        assert record.radius_cohen == pytest.approx(cohen_radius(0.25, record.p_a_lower, record.p_b_upper))
        assert sum(record.counts) == 1000

    def test_lower_bound_helper(self):
        """Test the Clopper-Pearson lower bound on a full count"""
        assert lower_confidence_bound(50, 50, 0.05) == pytest.approx(0.05 ** (1 / 50), abs=1e-9)

    def test_abstain_at_boundary(self):
        """Test abstention with zero radii at a decision boundary"""
        record = certify(threshold, torch.zeros(2), 1.0, 50, 500, 0.01, seed=0, num_classes=2,
                         extended=ExtendedRadiusParams(0.1, 0.2))
        assert record.abstained
        assert record.prediction == ABSTAIN
        assert record.radius_cohen == 0.0 and record.radius_extended == 0.0

    def test_extended_radius_reported(self):
        """Test that the extended radius is attached when parameters are given"""
        params = ExtendedRadiusParams(0.1, 0.2)
        record = certify(constant(0), torch.zeros(2), 0.25, 10, 200, 0.01, seed=0, num_classes=2, extended=params)
        assert record.radius_extended == pytest.approx(extended_radius(params, record.p_a_lower, record.p_b_upper))
        assert record.p_a_lower >= record.p_b_upper

    def test_deterministic(self, point_classifier):
        """Test that certify is deterministic per seed"""
        x = torch.tensor([0.5, 0.5], dtype=torch.float64)
        a = certify(point_classifier, x, 0.25, 20, 200, 0.01, seed=7)
        b = certify(point_classifier, x, 0.25, 20, 200, 0.01, seed=7)
        assert a == b

    def test_record_serialization(self):
        """Test the JSON-lines record of a certificate"""
        record = certify(constant(1), torch.zeros(2), 0.25, 10, 100, 0.01, seed=0, num_classes=2)
        row = record.to_record(index=3)
        assert row['index'] == 3
        assert row['prediction'] == 1
        assert row['counts'] == [0, 100]
        assert isinstance(record, CertificateRecord)

    @pytest.mark.parametrize("alpha,n0,n", [(0.0, 10, 10), (1.0, 10, 10), (0.01, 0, 10), (0.01, 10, 0)])
    def test_invalid(self, alpha, n0, n):
        """Test argument validation"""
        with pytest.raises(ArgumentError):
            certify(constant(0), torch.zeros(2), 0.25, n0, n, alpha, seed=0, num_classes=2)


class TestPerturbationStability:
    """Test the empirical soundness spot check"""

    def test_far_from_boundary(self):
        """Test that perturbations inside the certified radius keep the prediction"""
        x = torch.tensor([1.0, 0.0], dtype=torch.float64)
        record = certify(threshold, x, 0.5, 100, 1000, 0.01, seed=0, num_classes=2)
        assert record.prediction == 1
        assert perturbation_stability(threshold, x, record, trials=100, seed=1, num_classes=2) >= 0.99

    def test_abstained_certificate(self):
        """Test that abstained certificates cannot be spot-checked"""
        record = CertificateRecord(ABSTAIN, 0.4, 0.6, 0.5, 0.0, 0.0, 10, 10, 0.01)
        with pytest.raises(ArgumentError, match="abstained"):
            perturbation_stability(threshold, torch.zeros(2), record, trials=5, seed=0, num_classes=2)


class TestSingleSample:
    """Test unbatched and batched single samples on image classifiers"""

    @pytest.fixture
    def conv_classifier(self):
        return build_classifier('small_conv', (1, 12, 12), 3, seed=0)

    def test_single_channel_image(self, conv_classifier, shapes_small):
        """Test that a (1, H, W) image keeps its channel axis"""
        x = shapes_small.samples[0]
        counts = smooth_predict(conv_classifier, x, 0.25, 20, seed=0)
        assert counts.sum() == 20

    def test_batched_image_matches(self, conv_classifier, shapes_small):
        """Test that a (1, 1, H, W) batch gives the same counts as the bare sample"""
        x = shapes_small.samples[0]
        a = smooth_predict(conv_classifier, x, 0.25, 20, seed=0)
        b = smooth_predict(conv_classifier, x.unsqueeze(0), 0.25, 20, seed=0)
        assert np.array_equal(a, b)

    def test_certify_single_channel_image(self, conv_classifier, shapes_small):
        """Test certification of an unbatched single-channel image"""
        record = certify(conv_classifier, shapes_small.samples[0], 0.25, 10, 50, 0.01, seed=0)
        assert record.n == 50
        assert sum(record.counts) == 50

    def test_wrong_shape(self, conv_classifier):
        """Test that batches of more than one sample are rejected"""
        with pytest.raises(ArgumentError, match="Expected one sample"):
            smooth_predict(conv_classifier, torch.zeros(2, 1, 12, 12), 0.25, 10, seed=0)
