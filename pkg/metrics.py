"""
metrics.py

Image-quality and evaluation metrics.

- ssim / ssim_batch / ssim_map: differentiable Gaussian-window SSIM (torch)
- psnr / psnr_batch: peak signal-to-noise ratio with a finite cap
- accuracy: argmax accuracy of any model or pipeline on a LabeledDataset
- grad_sensitivity_probe: mean input-gradient norms on clean, augmented and
  adversarial versions of the same samples
- feature_distance: penultimate-feature distance diagnostic (not LPIPS)
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from config import ClassifierConfig, MetricConfig
from exceptions import ArgumentError, EmptyDatasetError, UnsupportedShapeError
from seeding import make_generator

logger = logging.getLogger(__name__)


# ============================================================================
# REPORTS
# ============================================================================

@dataclass(frozen=True)
class MetricReport:
    """Per-sample values of one metric with their mean and population std."""
    name: str
    values: np.ndarray
    mean: float
    std: float

    @classmethod
    def from_values(cls, name: str, values) -> 'MetricReport':
        if isinstance(values, torch.Tensor):
            values = values.detach().cpu().numpy()
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise ArgumentError(f"Metric '{name}' has no values")
        return cls(name, values, float(values.mean()), float(values.std()))

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(self.values.size)

    def to_record(self, **cell) -> dict:
        record = dict(cell)
        record.update({
            'metric': self.name,
            'n': int(self.values.size),
            'mean': self.mean,
            'std': self.std,
            'stderr': self.stderr,
            'values': [float(v) for v in self.values],
        })
        return record


@dataclass(frozen=True)
class SensitivityReport:
    """Mean ||grad_x J|| per set with standard errors, plus normalised loss-change ratios."""
    clean_mean: float
    clean_stderr: float
    augmented_mean: float
    augmented_stderr: float
    adversarial_mean: float
    adversarial_stderr: float
    augmented_ratio: float
    adversarial_ratio: float
    n: int
    per_sample: dict = field(default_factory=dict, repr=False)

    def ordered(self, margin: float = 0.0) -> bool:
        """adversarial >= augmented >= clean, each by a relative margin."""
        return (self.augmented_mean >= (1 + margin) * self.clean_mean
                and self.adversarial_mean >= (1 + margin) * self.augmented_mean)


# ============================================================================
# SSIM / PSNR
# ============================================================================

def _as_image_batch(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 2:
        return x.unsqueeze(0).unsqueeze(0)
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise UnsupportedShapeError(x.shape, "a single channel")
        return x.unsqueeze(0)
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise UnsupportedShapeError(x.shape, "a single channel")
        return x
    raise UnsupportedShapeError(x.shape, "(H, W), (1, H, W) or (N, 1, H, W) images")


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ArgumentError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _as_image_batch(a), _as_image_batch(b)


def gaussian_window(size: int = MetricConfig.SSIM_WINDOW, sigma: float = MetricConfig.SSIM_SIGMA,
                    dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return (g.view(-1, 1) * g.view(1, -1)).view(1, 1, size, size)


def _filter(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    pad = window.shape[-1] // 2
    return F.conv2d(F.pad(x, (pad, pad, pad, pad), mode='reflect'), window)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Local SSIM over a 7x7 Gaussian window (sigma 1.5) with reflective padding, data range 1."""
    a, b = _check_pair(a, b)
    dtype = torch.promote_types(a.dtype, b.dtype)
    a, b = a.to(dtype), b.to(dtype)
    window = gaussian_window(dtype=dtype).to(a.device)
    c1 = (MetricConfig.SSIM_K1 * MetricConfig.DATA_RANGE) ** 2
    c2 = (MetricConfig.SSIM_K2 * MetricConfig.DATA_RANGE) ** 2

    mu_a, mu_b = _filter(a, window), _filter(b, window)
    var_a = _filter(a * a, window) - mu_a ** 2
    var_b = _filter(b * b, window) - mu_b ** 2
    cov = _filter(a * b, window) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM, shape (N,)."""
    return ssim_map(a, b).flatten(1).mean(dim=1)


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM as a differentiable 0-d tensor in (-1, 1]."""
    return ssim_batch(a, b).mean()


def psnr_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = _check_pair(a, b)
    mse = ((a.to(torch.float64) - b.to(torch.float64)) ** 2).flatten(1).mean(dim=1)
    values = torch.full_like(mse, MetricConfig.PSNR_CAP)
    positive = mse > 0
    values[positive] = 10 * torch.log10(MetricConfig.DATA_RANGE ** 2 / mse[positive])
    return values.clamp(max=MetricConfig.PSNR_CAP)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 * log10(1 / MSE) in dB over the whole pair; zero MSE returns the 99 dB cap."""
    if a.shape != b.shape:
        raise ArgumentError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.to(torch.float64) - b.to(torch.float64)) ** 2).mean())
    if mse == 0.0:
        return MetricConfig.PSNR_CAP
    return min(10 * math.log10(MetricConfig.DATA_RANGE ** 2 / mse), MetricConfig.PSNR_CAP)


# ============================================================================
# ACCURACY
# ============================================================================

def predict_labels(predictor, x: torch.Tensor, batch_size: int = ClassifierConfig.EVAL_BATCH_SIZE) -> torch.Tensor:
    """Class predictions from a callable returning logits (B, C) or labels (B,)."""
    outputs = []
    for start in range(0, x.shape[0], batch_size):
        out = predictor(x[start:start + batch_size])
        outputs.append(out.argmax(dim=1) if out.ndim == 2 else out.to(torch.int64))
    if not outputs:
        return torch.zeros(0, dtype=torch.int64)
    return torch.cat(outputs)


def accuracy(predictor, dataset, batch_size: int = ClassifierConfig.EVAL_BATCH_SIZE) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    if len(dataset) == 0:
        raise EmptyDatasetError()
    with torch.no_grad():
        predictions = predict_labels(predictor, dataset.samples, batch_size)
    return float((predictions == dataset.labels).to(torch.float64).mean())


# ============================================================================
# GRADIENT SENSITIVITY
# ============================================================================

def per_sample_loss_and_grad(model, x: torch.Tensor, y: torch.Tensor):
    """Per-sample cross-entropy and its gradient w.r.t. each sample's own input."""
    x = x.detach().clone().requires_grad_(True)
    losses = F.cross_entropy(model.forward(x), y, reduction='none')
    grad, = torch.autograd.grad(losses.sum(), x)
    return losses.detach(), grad.detach()


def augment_for_probe(dataset, epsilon: float, seed: int):
    """Gaussian noise (sigma = epsilon / 2) plus random one-pixel shifts for images."""
    generator = make_generator(seed)
    x = dataset.samples.to(torch.float64)
    x = x + (epsilon / 2) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    if dataset.is_image:
        shifts = torch.randint(-1, 2, (x.shape[0], 2), generator=generator)
        x = torch.stack([torch.roll(img, shifts=(int(dy), int(dx)), dims=(-2, -1))
                         for img, (dy, dx) in zip(x, shifts)])
        x = x.clamp(0.0, 1.0)
    return dataset.with_samples(x.to(torch.float32), name=f"{dataset.name}+augmented")


def _mean_and_stderr(values: torch.Tensor):
    values = values.to(torch.float64)
    n = values.numel()
    std = float(values.std(unbiased=True)) if n > 1 else 0.0
    return float(values.mean()), std / math.sqrt(n)


def _normalized_ratio(loss_ref, loss, x_ref, x):
    dist = (x.to(torch.float64) - x_ref.to(torch.float64)).flatten(1).norm(dim=1)
    moved = dist > 0
    if not bool(moved.any()):
        return 0.0
    return float(((loss[moved] - loss_ref[moved]).abs() / dist[moved]).mean())


def grad_sensitivity_probe(model, clean, augmented, adversarial, batch_size: int = 256) -> SensitivityReport:
    """Compare E||grad_x J|| on clean, augmented and adversarial versions of the same samples."""
    sets = (clean, augmented, adversarial)
    if any(len(d) == 0 for d in sets):
        raise EmptyDatasetError()
    if not len(clean) == len(augmented) == len(adversarial):
        raise ArgumentError(
            f"Probe sets must be aligned, got sizes {len(clean)}, {len(augmented)}, {len(adversarial)}")
    if not (torch.equal(clean.labels, augmented.labels) and torch.equal(clean.labels, adversarial.labels)):
        raise ArgumentError("Probe sets must share labels")

    losses, norms = [], []
    for dataset in sets:
        batch_losses, batch_norms = [], []
        for start in range(0, len(dataset), batch_size):
            x = dataset.samples[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            loss, grad = per_sample_loss_and_grad(model, x, y)
            batch_losses.append(loss)
            batch_norms.append(grad.to(torch.float64).flatten(1).norm(dim=1))
        losses.append(torch.cat(batch_losses))
        norms.append(torch.cat(batch_norms))

    (c_mean, c_se), (a_mean, a_se), (v_mean, v_se) = (_mean_and_stderr(n) for n in norms)
    report = SensitivityReport(
        clean_mean=c_mean, clean_stderr=c_se,
        augmented_mean=a_mean, augmented_stderr=a_se,
        adversarial_mean=v_mean, adversarial_stderr=v_se,
        augmented_ratio=_normalized_ratio(losses[0], losses[1], clean.samples, augmented.samples),
        adversarial_ratio=_normalized_ratio(losses[0], losses[2], clean.samples, adversarial.samples),
        n=len(clean),
        per_sample={'clean': norms[0], 'augmented': norms[1], 'adversarial': norms[2]},
    )
    logger.info(f"Gradient sensitivity: clean={c_mean:.4g} augmented={a_mean:.4g} adversarial={v_mean:.4g}")
    return report


# ============================================================================
# FEATURE DISTANCE
# ============================================================================

def feature_distance(model, a: torch.Tensor, b: torch.Tensor) -> MetricReport:
    """L2 distance between penultimate classifier features. A diagnostic, not LPIPS."""
    if a.shape != b.shape:
        raise ArgumentError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        distance = (model.features(a) - model.features(b)).to(torch.float64).flatten(1).norm(dim=1)
    return MetricReport.from_values('classifier_feature_distance_not_lpips', distance)


__all__ = [
    'MetricReport',
    'SensitivityReport',
    'gaussian_window',
    'ssim_map',
    'ssim_batch',
    'ssim',
    'psnr_batch',
    'psnr',
    'predict_labels',
    'accuracy',
    'per_sample_loss_and_grad',
    'augment_for_probe',
    'grad_sensitivity_probe',
    'feature_distance',
]
