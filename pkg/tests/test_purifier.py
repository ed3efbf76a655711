"""
Tests for the guidance distance, guided reverse steps and purification.
"""
import pytest
import sys
import os

import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from classifier import logits
from config import GuidanceSettings
from diffusion import forward_sample, reverse_step
from exceptions import ArgumentError, NumericalFailureError, UnsupportedModeError
from metrics import ssim_batch
from purifier import (
    DistanceMode,
    GuidanceConfig,
    PurifiedClassifier,
    guidance_distance,
    guided_reverse_step,
    purify,
    purify_batches,
    step_seed,
)
from seeding import make_generator


def _pair(n=2, side=12, seed=0):
    generator = make_generator(seed)
    a = torch.rand(n, 1, side, side, generator=generator, dtype=torch.float64)
    b = torch.rand(n, 1, side, side, generator=generator, dtype=torch.float64)
    return a, b


def _points(n=4, seed=0):
    return torch.randn(n, 2, generator=make_generator(seed), dtype=torch.float64)


class TestGuidanceConfig:
    """Test guidance settings"""

    def test_negative_scale(self):
        """Test that s must be nonnegative"""
        with pytest.raises(ArgumentError, match="scale"):
            GuidanceConfig(t_star=3, scale=-1.0)

    def test_unknown_distance(self):
        """Test that unknown distance modes are rejected"""
        with pytest.raises(ArgumentError, match="Unknown guidance distance"):
            GuidanceConfig(t_star=3, distance='cosine')

    def test_from_settings_points(self):
        """Test that point data switches to the logit-only distance"""
        cfg = GuidanceConfig.from_settings(GuidanceSettings(), T=200, is_image=False)
        assert cfg.t_star == 60
        assert cfg.distance == DistanceMode.LOGIT_L2_ONLY

    @pytest.mark.parametrize("fraction, T, expected", [(0.57, 100, 57), (0.3, 200, 60), (0.29, 100, 29)])
    def test_from_settings_t_star_floor(self, fraction, T, expected):
        """Test that t* is the exact floor of fraction * T"""
        cfg = GuidanceConfig.from_settings(GuidanceSettings(t_star_fraction=fraction), T=T)
        assert cfg.t_star == expected

    def test_copies(self):
        """Test the t* and differentiable-mode copies"""
        cfg = GuidanceConfig(t_star=3, phi=0.2)
        assert cfg.with_t_star(7).t_star == 7
        assert cfg.with_t_star(7).phi == 0.2
        assert cfg.with_differentiable().differentiable_mode


class TestGuidanceDistance:
    """Test the logit + SSIM guidance distance"""

    def test_identity_literal_sign(self, image_classifier):
        """Test that identical inputs give phi under the literal +phi * SSIM form"""
        x, _ = _pair()
        d = guidance_distance(image_classifier, x, x, x, 0.5, 'logit_l2_plus_ssim', literal_ssim_sign=True)
        assert torch.allclose(d, torch.full((2,), 0.5, dtype=torch.float64), atol=1e-12)

    def test_identity_default_sign(self, image_classifier):
        """Test that identical inputs give zero under phi * (1 - SSIM)"""
        x, _ = _pair()
        d = guidance_distance(image_classifier, x, x, x, 0.5, 'logit_l2_plus_ssim')
        assert torch.allclose(d, torch.zeros(2, dtype=torch.float64), atol=1e-12)

    def test_phi_zero_isolates_logits(self, image_classifier):
        """Test that phi = 0 leaves only the logit distance"""
        a, b = _pair(seed=1)
        d = guidance_distance(image_classifier, a, b, b, 0.0, 'logit_l2_plus_ssim')
        expected = (logits(image_classifier, b) - logits(image_classifier, a)).norm(dim=1)
        assert torch.allclose(d, expected, atol=1e-12)

    def test_cross_module_consistency(self, image_classifier):
        """Test that D equals the logit distance plus the SSIM term from metrics"""
        x_t, x_ref = _pair(seed=2)
        x_in, _ = _pair(seed=3)
        phi = 0.7
        d = guidance_distance(image_classifier, x_t, x_ref, x_in, phi, 'logit_l2_plus_ssim')
        logit_term = (logits(image_classifier, x_ref) - logits(image_classifier, x_t)).norm(dim=1)
        expected = logit_term + phi * (1 - ssim_batch(x_in, x_t))
        assert torch.allclose(d, expected, atol=1e-9, rtol=0)
        literal = guidance_distance(image_classifier, x_t, x_ref, x_in, phi, 'logit_l2_plus_ssim',
                                    literal_ssim_sign=True)
        assert torch.allclose(literal, logit_term + phi * ssim_batch(x_in, x_t), atol=1e-9, rtol=0)

    def test_other_modes(self, image_classifier):
        """Test the mse, ssim-only and none modes"""
        x_t, x_ref = _pair(seed=4)
        mse = guidance_distance(image_classifier, x_t, x_ref, x_ref, 0.5, 'mse_only')
        assert torch.allclose(mse, ((x_t - x_ref) ** 2).flatten(1).mean(dim=1))
        ssim_only = guidance_distance(image_classifier, x_t, x_ref, x_ref, 0.5, 'ssim_only')
        assert torch.allclose(ssim_only, 0.5 * (1 - ssim_batch(x_ref, x_t)))
        assert torch.equal(guidance_distance(image_classifier, x_t, x_ref, x_ref, 0.5, 'none'),
                           torch.zeros(2, dtype=torch.float64))

    def test_ssim_on_points_unsupported(self, point_classifier):
        """Test that SSIM modes are refused for point data"""
        x = _points()
        with pytest.raises(UnsupportedModeError, match="logit_l2_plus_ssim"):
            guidance_distance(point_classifier, x, x, x, 0.5, 'logit_l2_plus_ssim')

    def test_probabilities(self, point_classifier):
        """Test that the probability variant compares softmax outputs"""
        a, b = _points(seed=1), _points(seed=2)
        d = guidance_distance(point_classifier, a, b, b, 0.0, 'logit_l2_only', use_probabilities=True)
        expected = (logits(point_classifier, b).softmax(1) - logits(point_classifier, a).softmax(1)).norm(dim=1)
        assert torch.allclose(d, expected, atol=1e-12)

    def test_gradient_matches_finite_differences(self, image_classifier):
        """Test the gradient of the full distance against central differences"""
        x_t, x_ref = _pair(1, seed=5)
        x_in, _ = _pair(1, seed=6)

        def distance(x):
            return guidance_distance(image_classifier, x, x_ref, x_in, 0.5, 'logit_l2_plus_ssim').sum()

        z = x_t.clone().requires_grad_(True)
        grad, = torch.autograd.grad(distance(z), z)
        h = 1e-5
        worst = 0.0
        for index in [(0, 0, 0, 0), (0, 0, 4, 6), (0, 0, 11, 3), (0, 0, 7, 7), (0, 0, 2, 10)]:
            step = torch.zeros_like(x_t)
            step[index] = h
            with torch.no_grad():
                fd = float((distance(x_t + step) - distance(x_t - step)) / (2 * h))
            worst = max(worst, abs(float(grad[index]) - fd) / max(abs(fd), 1e-6))
        assert worst < 1e-3


class TestGuidedReverseStep:
    """Test a single guided reverse step"""

    def test_zero_scale_bitwise(self, image_diffusion, image_classifier):
        """Test that s = 0 reproduces reverse_step bit for bit"""
        x_t, x_in = _pair(seed=7)
        cfg = GuidanceConfig(t_star=5, scale=0.0)
        guided = guided_reverse_step(image_diffusion, image_classifier, x_t, x_in, x_in, 5, cfg, seed=11)
        assert torch.equal(guided, reverse_step(image_diffusion, x_t, 5, 11))

    def test_none_distance_bitwise(self, point_diffusion, point_classifier):
        """Test that distance none reproduces reverse_step bit for bit"""
        x = _points()
        cfg = GuidanceConfig(t_star=5, scale=3.0, distance='none')
        guided = guided_reverse_step(point_diffusion, point_classifier, x, x, x, 4, cfg, seed=2)
        assert torch.equal(guided, reverse_step(point_diffusion, x, 4, 2))

    @pytest.mark.parametrize("t", [2, 5, 10])
    def test_quadratic_stub_shift(self, point_diffusion, t):
        """Test that D = 1/2 ||x_t - c||^2 shifts the mean by -s * posterior_var * (x_t - c)"""
        x = _points(seed=3)
        c = torch.tensor([0.25, -0.5], dtype=torch.float64)
        scale = 2.0
        cfg = GuidanceConfig(t_star=t, scale=scale, distance='logit_l2_only')

        def quadratic(z):
            return 0.5 * ((z - c) ** 2).sum(dim=1)

        guided = guided_reverse_step(point_diffusion, None, x, x, x, t, cfg, seed=5, distance_fn=quadratic)
        shift = guided - reverse_step(point_diffusion, x, t, 5)
        variance = point_diffusion.schedule.posterior_var[t - 1]
        assert torch.allclose(shift, -scale * variance * (x - c), atol=1e-12)

    def test_final_step_has_no_guidance_shift(self, point_diffusion):
        """Test that the zero posterior variance at t = 1 cancels the shift"""
        x = _points(seed=4)
        cfg = GuidanceConfig(t_star=1, scale=5.0, distance='logit_l2_only')

        def quadratic(z):
            return 0.5 * (z ** 2).sum(dim=1)

        guided = guided_reverse_step(point_diffusion, None, x, x, x, 1, cfg, seed=0, distance_fn=quadratic)
        assert torch.allclose(guided, reverse_step(point_diffusion, x, 1, 0), atol=1e-14)

    def test_non_finite_gradient(self, point_diffusion):
        """Test that a non-finite guidance gradient names the step"""
        x = _points()
        cfg = GuidanceConfig(t_star=3, distance='logit_l2_only')

        def broken(z):
            return (z * float('nan')).sum(dim=1)

        with pytest.raises(NumericalFailureError, match="t=3"):
            guided_reverse_step(point_diffusion, None, x, x, x, 3, cfg, seed=0, distance_fn=broken)

    def test_step_out_of_range(self, point_diffusion, point_classifier):
        """Test that steps outside [1, T] are rejected"""
        x = _points()
        with pytest.raises(ArgumentError):
            guided_reverse_step(point_diffusion, point_classifier, x, x, x, 0, GuidanceConfig(t_star=1), seed=0)


class TestPurify:
    """Test the full guided transfer"""

    def _unguided(self, diff, x_in, t_star, seed):
        eps_star = torch.randn(x_in.shape, generator=make_generator(seed), dtype=x_in.dtype)
        x = forward_sample(diff.schedule, x_in, t_star, eps_star)
        for t in range(t_star, 0, -1):
            x = reverse_step(diff, x, t, step_seed(seed, t))
        return x

    def test_zero_depth_is_identity(self, image_diffusion, image_classifier, shapes_small):
        """Test that t* = 0 returns the input exactly"""
        x = shapes_small.samples.double()
        for scale in (0.0, 1.0):
            out, trace = purify(image_diffusion, image_classifier, x, GuidanceConfig(t_star=0, scale=scale), seed=0)
            assert torch.equal(out, x)
            assert len(trace) == 0

    def test_depth_beyond_T(self, point_diffusion, point_classifier):
        """Test that t* > T is rejected"""
        with pytest.raises(ArgumentError, match="exceeds T"):
            purify(point_diffusion, point_classifier, _points(), GuidanceConfig(t_star=11, distance='logit_l2_only'), 0)

    def test_guidance_off_equivalence(self, point_diffusion, point_classifier):
        """Test that s = 0, distance none and the unguided chain agree bit for bit"""
        x = _points(seed=8)
        zero_scale = GuidanceConfig(t_star=6, scale=0.0, distance='logit_l2_only')
        no_distance = GuidanceConfig(t_star=6, scale=4.0, distance='none')
        a, _ = purify(point_diffusion, point_classifier, x, zero_scale, seed=2)
        b, _ = purify(point_diffusion, point_classifier, x, no_distance, seed=2)
        assert torch.equal(a, b)
        assert torch.equal(a, self._unguided(point_diffusion, x, 6, 2))

    def test_trace_and_range(self, image_diffusion, image_classifier, shapes_small):
        """Test trace length, output shape and the final image clamp"""
        x = shapes_small.samples[:4].double()
        out, trace = purify(image_diffusion, image_classifier, x, GuidanceConfig(t_star=4), seed=1)
        assert out.shape == x.shape
        assert len(trace) == 4
        assert [record.t for record in trace.steps] == [4, 3, 2, 1]
        assert float(out.min()) >= 0 and float(out.max()) <= 1
        records = trace.to_records(offset=10)
        assert len(records) == 16
        assert records[0]['sample'] == 10 and records[0]['step'] == 4

    def test_deterministic(self, image_diffusion, image_classifier, shapes_small):
        """Test that purification is deterministic per seed"""
        x = shapes_small.samples[:3].double()
        cfg = GuidanceConfig(t_star=3)
        a, _ = purify(image_diffusion, image_classifier, x, cfg, seed=4)
        b, _ = purify(image_diffusion, image_classifier, x, cfg, seed=4)
        c, _ = purify(image_diffusion, image_classifier, x, cfg, seed=5)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_fresh_reference_noise(self, point_diffusion, point_classifier):
        """Test that fresh reference noise changes the guidance"""
        x = _points(seed=9)
        shared = GuidanceConfig(t_star=6, distance='logit_l2_only', scale=5.0)
        fresh = GuidanceConfig(t_star=6, distance='logit_l2_only', scale=5.0, fresh_reference_noise=True)
        a, _ = purify(point_diffusion, point_classifier, x, shared, seed=0)
        b, _ = purify(point_diffusion, point_classifier, x, fresh, seed=0)
        assert not torch.equal(a, b)

    def test_ssim_mode_on_points(self, point_diffusion, point_classifier):
        """Test that SSIM guidance is refused for point inputs"""
        with pytest.raises(UnsupportedModeError):
            purify(point_diffusion, point_classifier, _points(), GuidanceConfig(t_star=2), seed=0)

    def test_shape_mismatch(self, point_diffusion, image_classifier):
        """Test that the classifier must accept the diffusion model's samples"""
        with pytest.raises(ArgumentError, match="classifier"):
            purify(point_diffusion, image_classifier, _points(), GuidanceConfig(t_star=2, distance='none'), 0)

    def test_non_finite_state(self, point_diffusion):
        """Test that a non-finite intermediate names the reverse step"""
        cfg = GuidanceConfig(t_star=4, distance='logit_l2_only')

        def exploding(z):
            return (z * float('inf')).sum(dim=1)

        with pytest.raises(NumericalFailureError, match="t=4"):
            purify(point_diffusion, None, _points(), cfg, seed=0, distance_fn=exploding)


class TestPurifiedClassifier:
    """Test batch purification and the end-to-end pipeline"""

    def test_workers_do_not_change_result(self, point_diffusion, point_classifier):
        """Test that sharded purification is independent of the pool size"""
        x = _points(n=10, seed=1)
        cfg = GuidanceConfig(t_star=3, distance='logit_l2_only')
        a, traces = purify_batches(point_diffusion, point_classifier, x, cfg, seed=0, batch_size=3, workers=1)
        b, _ = purify_batches(point_diffusion, point_classifier, x, cfg, seed=0, batch_size=3, workers=4)
        assert torch.equal(a, b)
        assert len(traces) == 4

    def test_pipeline_logits(self, point_diffusion, point_classifier):
        """Test logits shape, metadata and determinism of the pipeline"""
        cfg = GuidanceConfig(t_star=3, distance='logit_l2_only')
        pipeline = PurifiedClassifier(point_diffusion, point_classifier, cfg, seed=2)
        x = _points(n=5)
        out = pipeline(x)
        assert out.shape == (5, 4)
        assert torch.equal(out, pipeline(x))
        assert pipeline.class_count == 4
        assert pipeline.input_shape == (2,)
        assert not pipeline.differentiable

    def test_differentiable_forward(self, point_diffusion, point_classifier):
        """Test that the differentiable pipeline propagates gradients to the input"""
        cfg = GuidanceConfig(t_star=3, distance='logit_l2_only', differentiable_mode=True)
        pipeline = PurifiedClassifier(point_diffusion, point_classifier, cfg, seed=2)
        x = _points(n=3).requires_grad_(True)
        grad, = torch.autograd.grad(pipeline.forward(x).sum(), x)
        assert grad.shape == x.shape
        assert torch.isfinite(grad).all()
        assert float(grad.abs().sum()) > 0
