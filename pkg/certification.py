"""
certification.py

Randomized smoothing for any pipeline x -> class (a classifier, or the
purifier-prefixed classifier f(H(x))).

- smooth_predict: class histogram of f(x + delta), delta ~ N(0, sigma^2 I)
- smooth_classify: prediction with abstention from a binomial test on the top two counts
- certify: top class from n0 draws, one-sided exact lower bound on p_A from n fresh draws
- cohen_radius: (sigma / 2) * (Phi^-1(p_A) - Phi^-1(p_B))
- extended_radius: ((delta + sqrt(e^(2 gamma) - 1) * C_alpha + gamma * C_s) / 2) * (Phi^-1(p_A) - Phi^-1(p_B))
- gamma_from_schedule: gamma(t*) = -1/2 * ln(alpha_bar_t*)
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.stats import binomtest, norm
from statsmodels.stats.proportion import proportion_confint

from config import CertificationDefaults
from exceptions import ArgumentError
from metrics import predict_labels
from seeding import derive_seed, make_generator

logger = logging.getLogger(__name__)

ABSTAIN = CertificationDefaults.ABSTAIN


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class ExtendedRadiusParams:
    delta: float
    gamma_tstar: float
    c_alpha: float = 1.0
    c_s: float = 1.0

    def __post_init__(self):
        for name in ('delta', 'gamma_tstar', 'c_alpha', 'c_s'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ArgumentError(f"{name} must be a finite value >= 0, got {value}")

    @classmethod
    def from_schedule(cls, schedule, t_star: int, delta: float = 0.0,
                      c_alpha: float = 1.0, c_s: float = 1.0) -> 'ExtendedRadiusParams':
        return cls(delta, gamma_from_schedule(schedule, t_star), c_alpha, c_s)


@dataclass(frozen=True)
class CertificateRecord:
    """Outcome of certify() for one input. ABSTAIN carries zero radii."""
    prediction: int
    p_a_lower: float
    p_b_upper: float
    sigma: float
    radius_cohen: float
    radius_extended: float
    n0: int
    n: int
    alpha: float
    counts: tuple = ()

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN

    def to_record(self, **cell) -> dict:
        record = dict(cell)
        record.update({
            'prediction': self.prediction,
            'p_a_lower': self.p_a_lower,
            'p_b_upper': self.p_b_upper,
            'sigma': self.sigma,
            'radius_cohen': self.radius_cohen,
            'radius_extended': self.radius_extended,
            'n0': self.n0,
            'n': self.n,
            'alpha': self.alpha,
            'counts': list(self.counts),
        })
        return record


# ============================================================================
# SAMPLING
# ============================================================================

def _single(pipeline, x: torch.Tensor) -> torch.Tensor:
    """One sample of the pipeline's input shape; a leading batch axis of size 1 is dropped.

    Pipelines without an `input_shape` fall back to dropping any leading axis of size 1.
    """
    input_shape = getattr(pipeline, 'input_shape', None)
    if input_shape is None:
        return x[0] if x.ndim >= 2 and x.shape[0] == 1 else x
    input_shape = tuple(input_shape)
    if tuple(x.shape) == input_shape:
        return x
    if x.ndim == len(input_shape) + 1 and x.shape[0] == 1 and tuple(x.shape[1:]) == input_shape:
        return x[0]
    raise ArgumentError(f"Expected one sample of shape {input_shape}, got {tuple(x.shape)}")


def _class_count(pipeline, num_classes):
    if num_classes is not None:
        return int(num_classes)
    count = getattr(pipeline, 'class_count', None)
    if count is None:
        raise ArgumentError("num_classes is required for pipelines without a class_count")
    return int(count)


def smooth_predict(pipeline, x: torch.Tensor, sigma: float, n: int, seed: int,
                   num_classes: Optional[int] = None,
                   batch_size: int = CertificationDefaults.BATCH_SIZE) -> np.ndarray:
    """Histogram over classes of n predictions on x + N(0, sigma^2 I). Counts sum to n."""
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    if sigma < 0:
        raise ArgumentError(f"sigma must be >= 0, got {sigma}")
    num_classes = _class_count(pipeline, num_classes)
    x = _single(pipeline, x)
    generator = make_generator(seed)
    counts = np.zeros(num_classes, dtype=np.int64)
    remaining = n
    while remaining > 0:
        size = min(batch_size, remaining)
        batch = x.unsqueeze(0).expand(size, *x.shape)
        noise = torch.randn(batch.shape, generator=generator, dtype=x.dtype)
        with torch.no_grad():
            predictions = predict_labels(pipeline, batch + sigma * noise, batch_size)
        counts += np.bincount(predictions.numpy(), minlength=num_classes)[:num_classes]
        remaining -= size
    return counts


def lower_confidence_bound(n_a: int, n: int, alpha: float) -> float:
    """One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion."""
    return float(proportion_confint(n_a, n, alpha=2 * alpha, method="beta")[0])


def smooth_classify(pipeline, x: torch.Tensor, sigma: float, n: int, alpha: float, seed: int,
                    num_classes: Optional[int] = None):
    """Smoothed prediction that abstains unless the top class beats the runner-up at level alpha.

    Returns:
        tuple: (class or ABSTAIN, counts)
    """
    _check_alpha(alpha)
    counts = smooth_predict(pipeline, x, sigma, n, seed, num_classes)
    order = np.argsort(-counts, kind='stable')
    top = int(order[0])
    n_a = int(counts[top])
    n_b = int(counts[order[1]]) if counts.size > 1 else 0
    if binomtest(n_a, n_a + n_b, 0.5).pvalue > alpha:
        return ABSTAIN, counts
    return top, counts


# ============================================================================
# RADII
# ============================================================================

def _quantile(p: float) -> float:
    clamp = CertificationDefaults.QUANTILE_CLAMP
    if p < clamp or p > 1 - clamp:
        logger.debug(f"Clamping quantile argument {p}")
    return float(norm.ppf(min(max(p, clamp), 1 - clamp)))


def _check_probabilities(p_a: float, p_b: float):
    if not (0.0 <= p_b <= 1.0 and 0.0 <= p_a <= 1.0):
        raise ArgumentError(f"Probabilities must lie in [0, 1], got p_A={p_a}, p_B={p_b}")
    if p_a < p_b:
        raise ArgumentError(f"p_A={p_a} is smaller than p_B={p_b}")


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")


def cohen_radius(sigma: float, p_a: float, p_b: float) -> float:
    """(sigma / 2) * (Phi^-1(p_A) - Phi^-1(p_B)); exactly 0 when p_A == p_B."""
    _check_probabilities(p_a, p_b)
    if p_a == p_b:
        return 0.0
    return sigma / 2 * (_quantile(p_a) - _quantile(p_b))


def extended_radius(params: ExtendedRadiusParams, p_a: float, p_b: float) -> float:
    """Radius for the diffusion-prefixed classifier, evaluated literally and floored at 0."""
    _check_probabilities(p_a, p_b)
    if p_a == p_b:
        return 0.0
    prefactor = (params.delta + math.sqrt(math.expm1(2 * params.gamma_tstar)) * params.c_alpha
                 + params.gamma_tstar * params.c_s) / 2
    radius = prefactor * (_quantile(p_a) - _quantile(p_b))
    return radius if radius > 0 else 0.0


def gamma_from_alpha_bar(alpha_bar: float) -> float:
    if not 0.0 < alpha_bar <= 1.0:
        raise ArgumentError(f"alpha_bar must lie in (0, 1], got {alpha_bar}")
    return -0.5 * math.log(alpha_bar)


def gamma_from_schedule(schedule, t_star: int) -> float:
    """gamma(t*) = -1/2 * ln(alpha_bar_t*), so that e^(2 gamma) - 1 = (1 - alpha_bar) / alpha_bar."""
    index = schedule.check_step(t_star)
    return gamma_from_alpha_bar(float(schedule.alpha_bar[index]))


# ============================================================================
# CERTIFY
# ============================================================================

def certify(pipeline, x: torch.Tensor, sigma: float, n0: int, n: int, alpha: float, seed: int,
            num_classes: Optional[int] = None,
            extended: Optional[ExtendedRadiusParams] = None) -> CertificateRecord:
    """Certify the smoothed prediction at x in l_2.

    The top class is chosen from n0 draws; p_A is lower-bounded from n fresh draws
    with a one-sided exact binomial bound at level alpha and p_B = 1 - p_A.
    Abstains when the bound is <= 0.5. Deterministic per seed.
    """
    _check_alpha(alpha)
    if n0 < 1 or n < 1:
        raise ArgumentError(f"n0 and n must be >= 1, got n0={n0}, n={n}")

    selection = smooth_predict(pipeline, x, sigma, n0, derive_seed(seed, 'selection'), num_classes)
    top = int(np.argmax(selection))
    counts = smooth_predict(pipeline, x, sigma, n, derive_seed(seed, 'estimation'), num_classes)
    p_a = lower_confidence_bound(int(counts[top]), n, alpha)
    p_b = 1.0 - p_a

    if p_a <= 0.5:
        logger.warning(f"Abstaining: p_A lower bound {p_a:.4f} <= 0.5")
        return CertificateRecord(ABSTAIN, p_a, p_b, sigma, 0.0, 0.0, n0, n, alpha, tuple(int(c) for c in counts))

    radius = cohen_radius(sigma, p_a, p_b)
    radius_ext = extended_radius(extended, p_a, p_b) if extended is not None else 0.0
    logger.debug(f"Certified class {top}: p_A>={p_a:.4f} R={radius:.4f} R_ext={radius_ext:.4f}")
    return CertificateRecord(top, p_a, p_b, sigma, radius, radius_ext, n0, n, alpha,
                             tuple(int(c) for c in counts))


def perturbation_stability(pipeline, x: torch.Tensor, record: CertificateRecord, trials: int, seed: int,
                           num_classes: Optional[int] = None) -> float:
    """Fraction of random l_2 perturbations with norm < radius_cohen that keep the smoothed prediction.

    A statistical spot check of a certificate, not a proof.
    """
    if record.abstained:
        raise ArgumentError("Cannot spot-check an abstained certificate")
    x = _single(pipeline, x)
    generator = make_generator(derive_seed(seed, 'spot-check'))
    kept = 0
    for trial in range(trials):
        direction = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        direction = direction / direction.norm().clamp(min=1e-12)
        radius = record.radius_cohen * float(torch.rand(1, generator=generator, dtype=torch.float64))
        counts = smooth_predict(pipeline, x + radius * direction, record.sigma, record.n,
                                derive_seed(seed, 'spot-check', trial), num_classes)
        kept += int(np.argmax(counts)) == record.prediction
    return kept / trials


__all__ = [
    'ABSTAIN',
    'ExtendedRadiusParams',
    'CertificateRecord',
    'smooth_predict',
    'lower_confidence_bound',
    'smooth_classify',
    'cohen_radius',
    'extended_radius',
    'gamma_from_alpha_bar',
    'gamma_from_schedule',
    'certify',
    'perturbation_stability',
]
