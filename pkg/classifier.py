"""
classifier.py

Small differentiable classifiers f(x; theta) with deterministic training,
exact input gradients and a manifest + blob checkpoint format.

Both architectures use the smooth u * sigmoid(u) activation (nn.SiLU) so
that input gradients are defined everywhere.

Example:
    model, report = train_classifier(train, 'small_conv', epochs=30, seed=0, test_data=test)
    loss, grad = loss_and_input_grad(model, x, y)
"""
import copy
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import serialization
from config import ClassifierConfig, DataConfig
from exceptions import ArgumentError, ConfigurationError, EmptyDatasetError, TrainingFailureError
from metrics import accuracy
from seeding import derive_seed, make_generator, seeded_init

logger = logging.getLogger(__name__)


# ============================================================================
# NETWORKS
# ============================================================================

class Architecture(str, Enum):
    MLP = 'mlp'
    SMALL_CONV = 'small_conv'


class MLPNet(nn.Module):
    def __init__(self, input_dim: int, class_count: int,
                 hidden: int = ClassifierConfig.MLP_HIDDEN, depth: int = ClassifierConfig.MLP_DEPTH):
        super().__init__()
        layers, width = [nn.Flatten()], input_dim
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(width, class_count)

    def forward(self, x):
        return self.head(self.features(x))


class SmallConvNet(nn.Module):
    """Two 3x3 convolutions (8, 16 channels), 2x2 average pooling, one dense layer."""

    def __init__(self, input_shape: tuple, class_count: int, channels=ClassifierConfig.CONV_CHANNELS):
        super().__init__()
        in_channels, height, width = input_shape
        k = ClassifierConfig.CONV_KERNEL
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, channels[0], k, padding=k // 2),
            nn.SiLU(),
            nn.Conv2d(channels[0], channels[1], k, padding=k // 2),
            nn.SiLU(),
            nn.AvgPool2d(2),
            nn.Flatten(),
        )
        self.head = nn.Linear(channels[1] * (height // 2) * (width // 2), class_count)

    def forward(self, x):
        return self.head(self.features(x))


def _build_network(arch: Architecture, input_shape: tuple, class_count: int) -> nn.Module:
    if arch == Architecture.MLP:
        return MLPNet(int(np.prod(input_shape)), class_count)
    if len(input_shape) != 3:
        raise ArgumentError(f"small_conv needs (C, H, W) inputs, got {input_shape}")
    return SmallConvNet(input_shape, class_count)


# ============================================================================
# MODEL
# ============================================================================

@dataclass(eq=False)
class ClassifierModel:
    """A trained (immutable) classifier.

    Args:
        architecture (Architecture): mlp or small_conv.
        network (nn.Module): The torch network; parameters are frozen.
        class_count (int): Number of logits C.
        input_shape (tuple): Shape of one sample.
        seed (int): Training seed.
    """
    architecture: Architecture
    network: nn.Module
    class_count: int
    input_shape: tuple
    seed: int = 0

    def __post_init__(self):
        self.network.eval()
        self.network.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.network.parameters()).dtype

    def parameters(self) -> dict:
        """Named parameter arrays in state-dict order."""
        return {name: p.detach() for name, p in self.network.state_dict().items()}

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ArgumentError(f"Batch shape {tuple(x.shape)} does not match input shape {self.input_shape}")
        return x.to(self.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable logits (B, C)."""
        return self.network(self._check(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.network.features(self._check(x))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return logits(self, x)

    def double(self) -> 'ClassifierModel':
        """Float64 copy, for gradient checks."""
        return ClassifierModel(self.architecture, copy.deepcopy(self.network).double(),
                               self.class_count, self.input_shape, self.seed)


@dataclass(frozen=True)
class TrainReport:
    epoch_losses: list
    train_accuracy: float
    test_accuracy: float
    seed: int


def build_classifier(arch, input_shape: tuple, class_count: int, seed: int) -> ClassifierModel:
    """Untrained classifier with seeded initialisation."""
    arch = Architecture(arch)
    with seeded_init(seed):
        network = _build_network(arch, tuple(input_shape), class_count)
    return ClassifierModel(arch, network, class_count, tuple(input_shape), seed)


# ============================================================================
# OPERATIONS
# ============================================================================

def train_classifier(data, arch, epochs: int, seed: int, test_data=None,
                     learning_rate: float = ClassifierConfig.LEARNING_RATE,
                     batch_size: int = ClassifierConfig.BATCH_SIZE):
    """Plain SGD on mean cross-entropy. Deterministic per seed.

    Returns:
        tuple: (ClassifierModel, TrainReport). Without test_data the test accuracy
        is reported on the training set.
    """
    if len(data) == 0:
        raise EmptyDatasetError()
    if epochs < 1:
        raise ArgumentError(f"epochs must be >= 1, got {epochs}")

    arch = Architecture(arch)
    with seeded_init(seed):
        network = _build_network(arch, data.sample_shape, data.class_count)
    network.train()
    optimizer = torch.optim.SGD(network.parameters(), lr=learning_rate)
    generator = make_generator(derive_seed(seed, 'classifier-shuffle'))
    x_all, y_all = data.samples, data.labels

    epoch_losses = []
    for epoch in range(1, epochs + 1):
        order = torch.randperm(len(data), generator=generator)
        total, count = 0.0, 0
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(network(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                logger.error(f"Classifier loss became non-finite at epoch {epoch}")
                raise TrainingFailureError(epoch, float(loss), 'classifier')
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * idx.numel()
            count += idx.numel()
        if not all(torch.isfinite(p).all() for p in network.parameters()):
            raise TrainingFailureError(epoch, float('nan'), 'classifier')
        epoch_losses.append(total / count)
        logger.debug(f"classifier epoch {epoch}/{epochs}: loss={epoch_losses[-1]:.4f}")

    model = ClassifierModel(arch, network, data.class_count, data.sample_shape, seed)
    train_acc = accuracy(model, data)
    test_acc = accuracy(model, test_data) if test_data is not None else train_acc
    logger.info(f"Trained {arch.value} classifier: loss={epoch_losses[-1]:.4f} "
                f"train_acc={train_acc:.3f} test_acc={test_acc:.3f}")
    return model, TrainReport(epoch_losses, train_acc, test_acc, seed)


def logits(model: ClassifierModel, batch: torch.Tensor) -> torch.Tensor:
    """Logits (B, C); an empty batch gives a (0, C) array."""
    if batch.shape[0] == 0:
        model._check(batch)
        return torch.zeros(0, model.class_count, dtype=model.dtype)
    with torch.no_grad():
        return model.forward(batch)


def predict(model: ClassifierModel, batch: torch.Tensor) -> torch.Tensor:
    return logits(model, batch).argmax(dim=1)


def check_labels(y: torch.Tensor, class_count: int):
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= class_count):
        raise ArgumentError(f"Labels must lie in [0, {class_count})")


def loss_and_input_grad(model: ClassifierModel, x: torch.Tensor, y: torch.Tensor):
    """Mean cross-entropy J(x, y; theta) and its exact gradient w.r.t. x."""
    if x.shape[0] != y.shape[0]:
        raise ArgumentError(f"{x.shape[0]} samples but {y.shape[0]} labels")
    check_labels(y, model.class_count)
    x = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(model.forward(x), y)
    grad, = torch.autograd.grad(loss, x)
    return float(loss), grad.to(x.dtype)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_classifier(model: ClassifierModel, stem):
    """JSON manifest + f32le parameter blobs in manifest order."""
    entries, chunks, offset = [], [], 0
    for name, tensor in model.parameters().items():
        blob = serialization.encode(tensor.cpu().numpy(), DataConfig.SAMPLE_DTYPE)
        entries.append({'name': name, 'shape': list(tensor.shape), 'offset': offset})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        'kind': 'classifier',
        'architecture': model.architecture.value,
        'input_shape': list(model.input_shape),
        'class_count': model.class_count,
        'seed': model.seed,
        'dtype': DataConfig.SAMPLE_DTYPE,
        'parameters': entries,
    }
    return serialization.write_pair(stem, manifest, b''.join(chunks))


def load_classifier(stem) -> ClassifierModel:
    manifest, payload = serialization.read_pair(stem)
    if manifest.get('kind') != 'classifier':
        raise ConfigurationError("Not a classifier checkpoint", path=stem)
    model = build_classifier(manifest['architecture'], tuple(manifest['input_shape']),
                             manifest['class_count'], manifest['seed'])
    state = {
        e['name']: torch.from_numpy(serialization.decode(payload, manifest['dtype'], e['offset'], tuple(e['shape'])))
        for e in manifest['parameters']
    }
    try:
        model.network.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigurationError("Checkpoint does not match architecture", path=stem, original_error=e) from e
    logger.info(f"Loaded {manifest['architecture']} classifier from {stem}")
    return model


__all__ = [
    'Architecture',
    'MLPNet',
    'SmallConvNet',
    'ClassifierModel',
    'TrainReport',
    'build_classifier',
    'train_classifier',
    'logits',
    'predict',
    'check_labels',
    'loss_and_input_grad',
    'save_classifier',
    'load_classifier',
]
