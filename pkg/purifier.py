"""
purifier.py

Guided distribution transfer: diffuse an input forward to depth t*, then
denoise it back with reverse steps whose mean is pulled toward the input by
the gradient of a guidance distance

    D(x_t) = ||f(x'_t) - f(x_t)||_2 + phi * (1 - SSIM(x_in, x_t))

where x'_t = sqrt(alpha_bar_t) * x_in + sqrt(1 - alpha_bar_t) * eps* is the
reference trajectory built from a single noise draw eps*. Each guided step
samples N(mu - s * posterior_var_t * grad D, posterior_var_t * I).

With literal_ssim_sign the similarity term is +phi * SSIM(x_in, x_t) instead.

Example:
    cfg = GuidanceConfig(t_star=60, scale=1.0, phi=0.5)
    purified, trace = purify(diff, clf, x_adv, cfg, seed=0)
    pipeline = PurifiedClassifier(diff, clf, cfg, seed=0)
    accuracy(pipeline, adversarial_set)
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from config import GuidanceDefaults, steps_for_fraction
from diffusion import forward_sample, posterior_std, reverse_mean, reverse_noise, reverse_step
from exceptions import ArgumentError, NumericalFailureError, UnsupportedModeError
from metrics import ssim_batch
from seeding import derive_seed, make_generator

logger = logging.getLogger(__name__)


class DistanceMode(str, Enum):
    LOGIT_L2_PLUS_SSIM = 'logit_l2_plus_ssim'
    LOGIT_L2_ONLY = 'logit_l2_only'
    MSE_ONLY = 'mse_only'
    SSIM_ONLY = 'ssim_only'
    NONE = 'none'


_SSIM_MODES = (DistanceMode.LOGIT_L2_PLUS_SSIM, DistanceMode.SSIM_ONLY)


# ============================================================================
# CONFIGURATION AND TRACES
# ============================================================================

@dataclass(frozen=True)
class GuidanceConfig:
    """Guided-transfer settings.

    Args:
        t_star (int): Forward depth; 0 disables purification.
        scale (float): Guidance scale s >= 0.
        phi (float): Weight of the SSIM term.
        distance (DistanceMode): Guidance distance; none gives unguided reverse steps.
        differentiable_mode (bool): Keep the autograd graph through every step.
        literal_ssim_sign (bool): Use +phi * SSIM instead of phi * (1 - SSIM).
        fresh_reference_noise (bool): Draw new reference noise at every step instead of reusing eps*.
        use_probabilities (bool): Compare softmax outputs instead of raw logits.
    """
    t_star: int
    scale: float = GuidanceDefaults.SCALE
    phi: float = GuidanceDefaults.PHI
    distance: DistanceMode = DistanceMode.LOGIT_L2_PLUS_SSIM
    differentiable_mode: bool = False
    literal_ssim_sign: bool = False
    fresh_reference_noise: bool = False
    use_probabilities: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, 'distance', DistanceMode(self.distance))
        except ValueError as e:
            raise ArgumentError(f"Unknown guidance distance '{self.distance}'", e) from e
        if self.t_star < 0:
            raise ArgumentError(f"t_star must be >= 0, got {self.t_star}")
        if self.scale < 0:
            raise ArgumentError(f"Guidance scale must be >= 0, got {self.scale}")

    @classmethod
    def from_settings(cls, settings, T: int, is_image: bool = True, differentiable_mode: bool = False):
        distance = settings.distance
        if not is_image and DistanceMode(distance) in _SSIM_MODES:
            distance = GuidanceDefaults.POINT_DISTANCE
        return cls(
            t_star=steps_for_fraction(settings.t_star_fraction, T),
            scale=settings.scale,
            phi=settings.phi,
            distance=distance,
            differentiable_mode=differentiable_mode,
            literal_ssim_sign=settings.literal_ssim_sign,
            fresh_reference_noise=settings.fresh_reference_noise,
            use_probabilities=settings.use_probabilities,
        )

    def with_t_star(self, t_star: int) -> 'GuidanceConfig':
        return GuidanceConfig(t_star, self.scale, self.phi, self.distance, self.differentiable_mode,
                              self.literal_ssim_sign, self.fresh_reference_noise, self.use_probabilities)

    def with_differentiable(self, enabled: bool = True) -> 'GuidanceConfig':
        return GuidanceConfig(self.t_star, self.scale, self.phi, self.distance, enabled,
                              self.literal_ssim_sign, self.fresh_reference_noise, self.use_probabilities)


@dataclass(frozen=True)
class StepRecord:
    t: int
    distance: np.ndarray
    grad_norm: np.ndarray


@dataclass
class PurifyTrace:
    steps: list = field(default_factory=list)
    output: torch.Tensor = None

    def __len__(self):
        return len(self.steps)

    def to_records(self, offset: int = 0) -> list:
        """One record per (sample, step)."""
        records = []
        for record in self.steps:
            for i, (d, g) in enumerate(zip(record.distance, record.grad_norm)):
                records.append({'sample': offset + i, 'step': record.t,
                                'distance': float(d), 'grad_norm': float(g)})
        return records


# ============================================================================
# GUIDANCE
# ============================================================================

def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    """Per-row L2 norm with a zero (not NaN) gradient at v = 0."""
    sq = (v * v).flatten(1).sum(dim=1)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(sq))


def _outputs(clf, x: torch.Tensor, use_probabilities: bool) -> torch.Tensor:
    out = clf.forward(x).to(x.dtype)
    return F.softmax(out, dim=1) if use_probabilities else out


def guidance_distance(clf, x_t: torch.Tensor, x_ref_t: torch.Tensor, x_in: torch.Tensor, phi: float,
                      mode, literal_ssim_sign: bool = False, use_probabilities: bool = False) -> torch.Tensor:
    """Per-sample guidance distance D, shape (B,); differentiable in x_t."""
    mode = DistanceMode(mode)
    if x_t.shape != x_ref_t.shape or x_t.shape != x_in.shape:
        raise ArgumentError(
            f"Shape mismatch: x_t {tuple(x_t.shape)}, x_ref_t {tuple(x_ref_t.shape)}, x_in {tuple(x_in.shape)}")
    is_image = x_t.ndim == 4
    if mode in _SSIM_MODES and not is_image:
        raise UnsupportedModeError(mode.value, "the SSIM term is only defined for image data")

    if mode == DistanceMode.NONE:
        return torch.zeros(x_t.shape[0], dtype=x_t.dtype)
    if mode == DistanceMode.MSE_ONLY:
        return ((x_t - x_ref_t) ** 2).flatten(1).mean(dim=1)

    total = torch.zeros(x_t.shape[0], dtype=x_t.dtype)
    if mode in (DistanceMode.LOGIT_L2_PLUS_SSIM, DistanceMode.LOGIT_L2_ONLY):
        total = total + _safe_norm(_outputs(clf, x_ref_t, use_probabilities) - _outputs(clf, x_t, use_probabilities))
    if mode in _SSIM_MODES:
        similarity = ssim_batch(x_in, x_t).to(x_t.dtype)
        total = total + (phi * similarity if literal_ssim_sign else phi * (1.0 - similarity))
    return total


def _distance_fn(clf, x_ref_t, x_in, cfg: GuidanceConfig):
    return lambda x: guidance_distance(clf, x, x_ref_t, x_in, cfg.phi, cfg.distance,
                                       cfg.literal_ssim_sign, cfg.use_probabilities)


def _non_finite_hook(t: int):
    def hook(grad):
        if not torch.isfinite(grad).all():
            raise NumericalFailureError("Non-finite pipeline gradient", step=t)
        return grad
    return hook


def _guided_step(diff, clf, x_t, x_ref_t, x_in, t: int, cfg: GuidanceConfig, seed: int, distance_fn=None):
    """One guided reverse step. Returns (x_{t-1}, StepRecord)."""
    guided = distance_fn is not None or cfg.distance != DistanceMode.NONE
    distance_fn = distance_fn or _distance_fn(clf, x_ref_t, x_in, cfg)
    create_graph = cfg.differentiable_mode

    with torch.enable_grad():
        x_var = x_t if (create_graph and x_t.requires_grad) else x_t.detach().requires_grad_(True)
        if guided:
            distance = distance_fn(x_var)
            grad, = torch.autograd.grad(distance.sum(), x_var, create_graph=create_graph, allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(x_var)
            if not torch.isfinite(grad).all():
                logger.error(f"Non-finite guidance gradient at reverse step t={t}")
                raise NumericalFailureError("Non-finite guidance gradient", step=t)
            record = StepRecord(t, distance.detach().to(torch.float64).numpy().copy(),
                                grad.detach().to(torch.float64).flatten(1).norm(dim=1).numpy().copy())
        else:
            grad = None
            record = StepRecord(t, np.zeros(x_t.shape[0]), np.zeros(x_t.shape[0]))

    if not create_graph and (grad is None or cfg.scale == 0):
        return reverse_step(diff, x_t, t, seed), record

    variance = diff.schedule.posterior_var[diff.schedule.check_step(t)].to(x_t.dtype)
    if create_graph:
        if x_var.grad_fn is not None:
            x_var.register_hook(_non_finite_hook(t))
        with torch.enable_grad():
            mean = reverse_mean(diff, x_var, t)
            if grad is not None:
                mean = mean - cfg.scale * variance * grad
    else:
        with torch.no_grad():
            mean = reverse_mean(diff, x_t.detach(), t) - cfg.scale * variance * grad.detach()
    if t == 1:
        return mean, record
    return mean + posterior_std(diff.schedule, t).to(x_t.dtype) * reverse_noise(x_t, seed), record


def guided_reverse_step(diff, clf, x_t: torch.Tensor, x_ref_t: torch.Tensor, x_in: torch.Tensor, t: int,
                        cfg: GuidanceConfig, seed: int, distance_fn=None) -> torch.Tensor:
    """Sample N(mu_theta(x_t, t) - s * posterior_var_t * grad_x_t D, posterior_var_t * I).

    The gradient is taken through x_t only; x_ref_t and x_in are constants.
    `distance_fn`, when given, replaces the configured distance (maps x_t to per-sample D).
    With s = 0 the result is bitwise equal to diffusion.reverse_step under the same seed.
    """
    diff.schedule.check_step(t)
    if not cfg.differentiable_mode:
        x_ref_t, x_in = x_ref_t.detach(), x_in.detach()
    x_prev, _ = _guided_step(diff, clf, x_t, x_ref_t, x_in, t, cfg, seed, distance_fn)
    return x_prev


# ============================================================================
# PURIFICATION
# ============================================================================

def step_seed(seed: int, t: int) -> int:
    """Seed of the reverse-step noise at step t."""
    return derive_seed(seed, 'reverse', t)


def _check_models(diff, clf, x_in: torch.Tensor, cfg: GuidanceConfig):
    if cfg.t_star > diff.schedule.T:
        raise ArgumentError(f"t_star={cfg.t_star} exceeds T={diff.schedule.T}")
    if tuple(x_in.shape[1:]) != tuple(diff.sample_shape):
        raise ArgumentError(f"Input shape {tuple(x_in.shape)} does not match diffusion model {diff.sample_shape}")
    if clf is not None and tuple(x_in.shape[1:]) != tuple(clf.input_shape):
        raise ArgumentError(f"Input shape {tuple(x_in.shape)} does not match classifier {clf.input_shape}")
    if cfg.distance in _SSIM_MODES and x_in.ndim != 4:
        raise UnsupportedModeError(cfg.distance.value, "the SSIM term is only defined for image data")


def purify(diff, clf, x_in: torch.Tensor, cfg: GuidanceConfig, seed: int, distance_fn=None):
    """Guided transfer of x_in: forward to t*, then t* guided reverse steps.

    Returns:
        tuple: (purified batch, PurifyTrace). Images are clamped to [0, 1] at the end.

    Raises:
        ArgumentError: t_star > T or incompatible shapes.
        NumericalFailureError: a non-finite intermediate, with the step index.
    """
    _check_models(diff, clf, x_in, cfg)
    if cfg.t_star == 0:
        return x_in.clone(), PurifyTrace([], x_in.clone())

    schedule = diff.schedule
    if not cfg.differentiable_mode:
        x_in = x_in.detach()
    generator = make_generator(seed)
    eps_star = torch.randn(x_in.shape, generator=generator, dtype=x_in.dtype)

    x = forward_sample(schedule, x_in, cfg.t_star, eps_star)
    trace = PurifyTrace()
    for t in range(cfg.t_star, 0, -1):
        if cfg.fresh_reference_noise:
            ref_noise = reverse_noise(x_in, derive_seed(seed, 'reference', t))
        else:
            ref_noise = eps_star
        x_ref = forward_sample(schedule, x_in, t, ref_noise)
        x, record = _guided_step(diff, clf, x, x_ref, x_in, t, cfg, step_seed(seed, t), distance_fn)
        if not torch.isfinite(x).all():
            logger.error(f"Purification produced non-finite values at reverse step t={t}")
            raise NumericalFailureError("Non-finite purification state", step=t)
        trace.steps.append(record)

    if x.ndim == 4:
        x = x.clamp(0.0, 1.0)
    trace.output = x.detach()
    return x, trace


def purify_batches(diff, clf, x: torch.Tensor, cfg: GuidanceConfig, seed: int,
                   batch_size: int = 100, workers: int = 1):
    """Purify in shards with per-shard derived seeds; the result does not depend on `workers`."""
    if x.shape[0] == 0:
        return x.clone(), []
    shards = [(i, x[start:start + batch_size]) for i, start in enumerate(range(0, x.shape[0], batch_size))]

    def run(item):
        index, shard = item
        return purify(diff, clf, shard, cfg, derive_seed(seed, 'shard', index))

    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, shards))
    else:
        results = [run(item) for item in shards]
    return torch.cat([out for out, _ in results]), [trace for _, trace in results]


@dataclass(eq=False)
class PurifiedClassifier:
    """The end-to-end map x -> f(purify(x)), deterministic for a fixed seed.

    forward() is differentiable when guidance.differentiable_mode is set, which
    makes the pipeline a valid target for attacks.adaptive_pgd.
    """
    diffusion: object
    classifier: object
    guidance: GuidanceConfig
    seed: int = 0
    batch_size: int = 100
    workers: int = 1

    @property
    def differentiable(self) -> bool:
        return self.guidance.differentiable_mode

    @property
    def class_count(self) -> int:
        return self.classifier.class_count

    @property
    def input_shape(self) -> tuple:
        return self.classifier.input_shape

    def purify(self, x: torch.Tensor) -> torch.Tensor:
        purified, _ = purify_batches(self.diffusion, self.classifier, x, self.guidance, self.seed,
                                     self.batch_size, self.workers)
        return purified

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier.forward(self.purify(x))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        purified = self.purify(x).detach()
        with torch.no_grad():
            return self.classifier.forward(purified)


__all__ = [
    'DistanceMode',
    'GuidanceConfig',
    'StepRecord',
    'PurifyTrace',
    'guidance_distance',
    'guided_reverse_step',
    'step_seed',
    'purify',
    'purify_batches',
    'PurifiedClassifier',
]
