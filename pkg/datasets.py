"""
datasets.py

Hermetic synthetic datasets and the five-family corruption generator.

- make_gaussian_mixture: 2D points around the vertices of a regular polygon
- make_shape_images: single-channel square / disk / triangle images in [0, 1]
- corrupt: gaussian_noise, shot_noise, impulse_noise, glass_blur, jpeg_like
  at severities 1..5 (0 is the identity)

Every function is a pure function of its arguments and seed.

Example:
    train = make_shape_images(n_per_class=200, side=16, seed=0)
    noisy = corrupt(train, CorruptionSpec('gaussian_noise', 3), seed=1)
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.fft
import torch

import serialization
from config import DataConfig
from exceptions import ArgumentError, EmptyDatasetError, UnsupportedShapeError
from seeding import derive_seed, make_generator

logger = logging.getLogger(__name__)


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Samples with integer labels.

    Args:
        samples (Tensor): (N, D) points or (N, 1, H, W) images with values in [0, 1].
        labels (Tensor): (N,) int64 labels in [0, class_count).
        class_count (int): Declared number of classes C.
        name (str): Generator that produced the data.
        seed (int): Seed the generator was called with.
    """
    samples: torch.Tensor
    labels: torch.Tensor
    class_count: int
    name: str = 'custom'
    seed: int = 0

    def __post_init__(self):
        if self.samples.shape[0] < 1:
            raise EmptyDatasetError()
        if self.samples.ndim not in (2, 4):
            raise UnsupportedShapeError(self.samples.shape, "(N, D) points or (N, 1, H, W) images")
        if self.labels.shape != (self.samples.shape[0],):
            raise ArgumentError(
                f"Expected {self.samples.shape[0]} labels, got shape {tuple(self.labels.shape)}")
        if self.class_count < 1:
            raise ArgumentError("class_count must be >= 1")
        if int(self.labels.min()) < 0 or int(self.labels.max()) >= self.class_count:
            raise ArgumentError(f"Labels must lie in [0, {self.class_count})")
        if self.is_image:
            if self.samples.shape[1] != 1:
                raise UnsupportedShapeError(self.samples.shape, "single-channel images")
            if float(self.samples.min()) < 0.0 or float(self.samples.max()) > 1.0:
                raise ArgumentError("Image values must lie in [0, 1]")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def is_image(self) -> bool:
        return self.samples.ndim == 4

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])

    def with_samples(self, samples: torch.Tensor, name=None) -> 'LabeledDataset':
        """Same labels and metadata around new samples of the same shape."""
        if samples.shape != self.samples.shape:
            raise ArgumentError(
                f"Replacement samples {tuple(samples.shape)} do not match {tuple(self.samples.shape)}")
        return LabeledDataset(samples.detach().to(torch.float32), self.labels, self.class_count,
                              name or self.name, self.seed)

    def subset(self, count: int) -> 'LabeledDataset':
        count = min(int(count), len(self))
        return LabeledDataset(self.samples[:count], self.labels[:count], self.class_count, self.name, self.seed)


class CorruptionFamily(str, Enum):
    GAUSSIAN_NOISE = 'gaussian_noise'
    GLASS_BLUR = 'glass_blur'
    IMPULSE_NOISE = 'impulse_noise'
    JPEG_LIKE = 'jpeg_like'
    SHOT_NOISE = 'shot_noise'


@dataclass(frozen=True)
class CorruptionSpec:
    family: CorruptionFamily
    severity: int

    def __post_init__(self):
        try:
            object.__setattr__(self, 'family', CorruptionFamily(self.family))
        except ValueError as e:
            raise ArgumentError(f"Unknown corruption family '{self.family}'", e) from e
        if not 0 <= int(self.severity) <= DataConfig.MAX_SEVERITY:
            raise ArgumentError(f"Severity must be in 0..{DataConfig.MAX_SEVERITY}, got {self.severity}")


# ============================================================================
# GENERATORS
# ============================================================================

def _shuffled(samples, labels, generator):
    order = torch.randperm(samples.shape[0], generator=generator)
    return samples[order], labels[order]


def mixture_vertices(n_classes: int) -> torch.Tensor:
    angles = 2 * math.pi * torch.arange(n_classes, dtype=torch.float64) / n_classes
    return DataConfig.MIXTURE_RADIUS * torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)


def make_gaussian_mixture(n_per_class: int, n_classes: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian blobs centred on the vertices of a regular n_classes-gon (unit circumradius)."""
    if n_per_class < 1:
        raise EmptyDatasetError(f"n_per_class must be >= 1, got {n_per_class}")
    if n_classes < 2:
        raise ArgumentError(f"n_classes must be >= 2, got {n_classes}")
    if not spread > 0:
        raise ArgumentError(f"spread must be > 0, got {spread}")

    generator = make_generator(seed)
    centers = mixture_vertices(n_classes).repeat_interleave(n_per_class, dim=0)
    noise = torch.randn(centers.shape, generator=generator, dtype=torch.float64)
    samples = (centers + spread * noise).to(torch.float32)
    labels = torch.arange(n_classes).repeat_interleave(n_per_class)
    samples, labels = _shuffled(samples, labels, generator)
    return LabeledDataset(samples, labels, n_classes, 'gaussian_mixture', seed)


def render_shape(kind: str, side: int, scale: float, intensity: float, top: int, left: int) -> torch.Tensor:
    """Rasterise one filled shape into a (side, side) image.

    The shape's bounding box is d x d with d = round(scale * side), anchored at (top, left).
    """
    if kind not in DataConfig.SHAPE_CLASSES:
        raise ArgumentError(f"Unknown shape '{kind}'")
    d = max(1, int(round(scale * side)))
    if top < 0 or left < 0 or top + d > side or left + d > side:
        raise ArgumentError(f"Shape of extent {d} at ({top}, {left}) does not fit a {side}x{side} image")

    # pixel centres
    y = torch.arange(side, dtype=torch.float64).view(-1, 1) + 0.5
    x = torch.arange(side, dtype=torch.float64).view(1, -1) + 0.5
    if kind == 'square':
        mask = (y > top) & (y < top + d) & (x > left) & (x < left + d)
    elif kind == 'disk':
        cy, cx, r = top + d / 2, left + d / 2, d / 2
        mask = (y - cy) ** 2 + (x - cx) ** 2 <= r ** 2
    else:
        # apex at the top edge, base along the bottom edge
        depth = y - top
        mask = (depth > 0) & (depth < d) & ((x - (left + d / 2)).abs() <= depth / 2)
    return mask.to(torch.float32) * float(intensity)


def make_shape_images(n_per_class: int, side: int, seed: int) -> LabeledDataset:
    """Class-balanced square / disk / triangle images with random position, scale and intensity."""
    if side < DataConfig.MIN_IMAGE_SIDE:
        raise ArgumentError(f"side must be >= {DataConfig.MIN_IMAGE_SIDE} for resolvable shapes, got {side}")
    if n_per_class < 1:
        raise EmptyDatasetError(f"n_per_class must be >= 1, got {n_per_class}")

    generator = make_generator(seed)
    images, labels = [], []
    for label, kind in enumerate(DataConfig.SHAPE_CLASSES):
        for _ in range(n_per_class):
            u = torch.rand(2, generator=generator, dtype=torch.float64)
            scale = DataConfig.SHAPE_MIN_SCALE + (DataConfig.SHAPE_MAX_SCALE - DataConfig.SHAPE_MIN_SCALE) * float(u[0])
            intensity = DataConfig.SHAPE_MIN_INTENSITY + (
                DataConfig.SHAPE_MAX_INTENSITY - DataConfig.SHAPE_MIN_INTENSITY) * float(u[1])
            d = max(1, int(round(scale * side)))
            top, left = torch.randint(0, side - d + 1, (2,), generator=generator).tolist()
            images.append(render_shape(kind, side, scale, intensity, top, left))
            labels.append(label)

    samples = torch.stack(images).unsqueeze(1)
    samples, labels = _shuffled(samples, torch.tensor(labels), generator)
    return LabeledDataset(samples, labels, len(DataConfig.SHAPE_CLASSES), 'shape_images', seed)


def make_dataset(settings, split: str = 'train') -> LabeledDataset:
    """Build the train or eval split described by DatasetSettings."""
    if split not in ('train', 'eval'):
        raise ArgumentError(f"Unknown split '{split}'")
    seed = settings.seed if split == 'train' else derive_seed(settings.seed, 'eval')
    count = settings.n_per_class if split == 'train' else settings.eval_per_class
    if settings.kind == 'shapes':
        return make_shape_images(count, settings.side, seed)
    return make_gaussian_mixture(count, settings.n_classes, settings.spread, seed)


# ============================================================================
# CORRUPTIONS
# ============================================================================

def _gaussian_noise(x, level, generator):
    sigma = DataConfig.GAUSSIAN_NOISE_SIGMA[level]
    return x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)


def _shot_noise(x, level, generator):
    photons = DataConfig.SHOT_NOISE_SCALE[level]
    return torch.poisson(x * photons, generator=generator) / photons


def _impulse_noise(x, level, generator):
    p = DataConfig.IMPULSE_NOISE_PROB[level]
    flip = torch.rand(x.shape, generator=generator, dtype=x.dtype) < p
    salt = (torch.rand(x.shape, generator=generator, dtype=x.dtype) < 0.5).to(x.dtype)
    return torch.where(flip, salt, x)


def _glass_blur(x, level, generator):
    radius, iterations = DataConfig.GLASS_BLUR_PARAMS[level]
    x = x.clone()
    n, _, height, width = x.shape
    rows = torch.arange(n)
    for _ in range(iterations):
        for h in range(height - radius - 1, radius - 1, -1):
            for w in range(width - radius - 1, radius - 1, -1):
                offsets = torch.randint(-radius, radius + 1, (n, 2), generator=generator)
                hp, wp = h + offsets[:, 0], w + offsets[:, 1]
                here = x[rows, 0, h, w].clone()
                x[rows, 0, h, w] = x[rows, 0, hp, wp]
                x[rows, 0, hp, wp] = here
    return x


def _jpeg_like(x, level, generator):
    step = DataConfig.JPEG_QUANT_STEP[level]
    b = DataConfig.JPEG_BLOCK
    n, c, height, width = x.shape
    hb, wb = height // b, width // b
    out = x.detach().cpu().numpy().astype(np.float64)
    region = out[:, :, :hb * b, :wb * b].reshape(n, c, hb, b, wb, b).transpose(0, 1, 2, 4, 3, 5)
    coeffs = scipy.fft.dctn(region, axes=(-2, -1), norm='ortho')
    coeffs = np.round(coeffs / step) * step
    region = scipy.fft.idctn(coeffs, axes=(-2, -1), norm='ortho')
    out[:, :, :hb * b, :wb * b] = region.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hb * b, wb * b)
    return torch.from_numpy(out).to(x.dtype)


_CORRUPTIONS = {
    CorruptionFamily.GAUSSIAN_NOISE: _gaussian_noise,
    CorruptionFamily.SHOT_NOISE: _shot_noise,
    CorruptionFamily.IMPULSE_NOISE: _impulse_noise,
    CorruptionFamily.GLASS_BLUR: _glass_blur,
    CorruptionFamily.JPEG_LIKE: _jpeg_like,
}


def corrupt_tensor(x: torch.Tensor, spec: CorruptionSpec, seed: int) -> torch.Tensor:
    """Apply a corruption to an (N, 1, H, W) batch; output clamped to [0, 1]."""
    if x.ndim != 4:
        raise UnsupportedShapeError(x.shape)
    if spec.severity == 0:
        return x.clone()
    generator = make_generator(seed)
    out = _CORRUPTIONS[spec.family](x.to(torch.float64), spec.severity - 1, generator)
    return out.clamp(0.0, 1.0).to(x.dtype)


def corrupt(dataset: LabeledDataset, spec: CorruptionSpec, seed: int) -> LabeledDataset:
    if not dataset.is_image:
        raise UnsupportedShapeError(dataset.samples.shape)
    samples = corrupt_tensor(dataset.samples, spec, seed)
    logger.debug(f"Corrupted {len(dataset)} images with {spec.family.value} severity {spec.severity}")
    return dataset.with_samples(samples, name=f"{dataset.name}+{spec.family.value}{spec.severity}")


# ============================================================================
# SERIALIZATION
# ============================================================================

def save_dataset(dataset: LabeledDataset, stem):
    """Write `<stem>.json` + `<stem>.bin`: f32le samples, then i32le labels at labels_offset."""
    samples = serialization.encode(dataset.samples.numpy(), DataConfig.SAMPLE_DTYPE)
    labels = serialization.encode(dataset.labels.numpy(), DataConfig.LABEL_DTYPE)
    manifest = {
        'generator': dataset.name,
        'shape': list(dataset.samples.shape),
        'dtype': DataConfig.SAMPLE_DTYPE,
        'label_dtype': DataConfig.LABEL_DTYPE,
        'class_count': dataset.class_count,
        'seed': dataset.seed,
        'labels_offset': len(samples),
        'count': len(dataset),
    }
    return serialization.write_pair(stem, manifest, samples + labels)


def load_dataset(stem) -> LabeledDataset:
    manifest, payload = serialization.read_pair(stem)
    shape = tuple(manifest['shape'])
    samples = serialization.decode(payload, manifest['dtype'], 0, shape)
    labels = serialization.decode(payload, manifest['label_dtype'], manifest['labels_offset'], (shape[0],))
    return LabeledDataset(torch.from_numpy(samples), torch.from_numpy(labels).to(torch.int64),
                          manifest['class_count'], manifest['generator'], manifest['seed'])


__all__ = [
    'LabeledDataset',
    'CorruptionFamily',
    'CorruptionSpec',
    'mixture_vertices',
    'make_gaussian_mixture',
    'render_shape',
    'make_shape_images',
    'make_dataset',
    'corrupt_tensor',
    'corrupt',
    'save_dataset',
    'load_dataset',
]
