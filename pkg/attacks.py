"""
attacks.py

Untargeted white-box attacks under l_inf / l_2 budgets.

- fgsm: one signed-gradient step, x_adv = clip(x + eps * sign(grad_x J))
- pgd: iterated ascent with projection onto the eps-ball and [0, 1]
- adaptive_pgd: pgd with exact gradients through a differentiable pipeline
  (forward diffusion, guided reverse steps, classifier)

Anything exposing a differentiable `forward(x) -> logits` can be attacked:
a ClassifierModel or a purifier.PurifiedClassifier.

Example:
    spec = AttackSpec.default('linf')
    result = pgd(model, x, y, spec, seed=0)
    print(result.success_rate)
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch
import torch.nn.functional as F

import serialization
from config import AttackDefaults
from datasets import LabeledDataset, save_dataset
from exceptions import ArgumentError, NumericalFailureError, UnsupportedModeError
from metrics import predict_labels
from seeding import make_generator

logger = logging.getLogger(__name__)

_DIVISION_FLOOR = 1e-12


class Norm(str, Enum):
    LINF = 'linf'
    L2 = 'l2'


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class AttackSpec:
    """Threat model of one attack.

    Args:
        norm (Norm): linf or l2.
        epsilon (float): Budget in data-range units; 0 gives the identity attack.
        steps (int): Ascent iterations (>= 1).
        step_size (float, optional): Defaults to eps/4 (linf) or 2*eps/steps (l2).
        random_start (bool): Seeded uniform start inside the ball.
        targeted (bool): Only untargeted attacks are supported.
    """
    norm: Norm
    epsilon: float
    steps: int = AttackDefaults.STEPS
    step_size: Optional[float] = None
    random_start: bool = True
    targeted: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, 'norm', Norm(self.norm))
        except ValueError as e:
            raise ArgumentError(f"Unknown norm '{self.norm}'", e) from e
        if self.targeted:
            raise UnsupportedModeError('targeted', "only untargeted attacks are implemented")
        if self.epsilon < 0:
            raise ArgumentError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ArgumentError(f"step_size must be > 0, got {self.step_size}")

    @classmethod
    def default(cls, norm, epsilon: Optional[float] = None, **kwargs) -> 'AttackSpec':
        norm = Norm(norm)
        if epsilon is None:
            epsilon = AttackDefaults.LINF_EPSILON if norm == Norm.LINF else AttackDefaults.L2_EPSILON
        return cls(norm, epsilon, **kwargs)

    @classmethod
    def from_settings(cls, settings) -> 'AttackSpec':
        return cls(settings.norm, settings.epsilon, settings.steps, settings.step_size)

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.norm == Norm.LINF:
            return AttackDefaults.LINF_STEP_FRACTION * self.epsilon
        return AttackDefaults.L2_STEP_FACTOR * self.epsilon / self.steps


@dataclass(frozen=True, eq=False)
class AttackResult:
    """Adversarial batch with per-sample success flags and achieved perturbation norms."""
    adversarial: torch.Tensor
    success: torch.Tensor
    norms: torch.Tensor
    steps_used: int
    labels: torch.Tensor
    clean_predictions: torch.Tensor
    adversarial_predictions: torch.Tensor
    norm: Norm = Norm.LINF
    epsilon: float = 0.0

    @property
    def success_rate(self) -> float:
        return float(self.success.to(torch.float64).mean()) if self.success.numel() else 0.0

    def to_records(self) -> list:
        return [
            {
                'index': i,
                'label': int(self.labels[i]),
                'prediction_before': int(self.clean_predictions[i]),
                'prediction_after': int(self.adversarial_predictions[i]),
                'norm': float(self.norms[i]),
                'success': bool(self.success[i]),
            }
            for i in range(self.labels.shape[0])
        ]


# ============================================================================
# HELPERS
# ============================================================================

def _check_inputs(x: torch.Tensor, y: torch.Tensor):
    if x.ndim < 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ArgumentError(f"Inputs {tuple(x.shape)} and labels {tuple(y.shape)} do not align")


def _view(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values.view(-1, *([1] * (like.ndim - 1)))


def perturbation_norms(delta: torch.Tensor, norm) -> torch.Tensor:
    flat = delta.detach().to(torch.float64).flatten(1)
    if Norm(norm) == Norm.LINF:
        return flat.abs().amax(dim=1)
    return flat.norm(dim=1)


def project(x_adv: torch.Tensor, x: torch.Tensor, norm: Norm, epsilon: float, is_image: bool) -> torch.Tensor:
    """Project onto the eps-ball around x (coordinate clamp or radial rescale), then onto [0, 1]."""
    if norm == Norm.LINF:
        x_adv = torch.max(torch.min(x_adv, x + epsilon), x - epsilon)
    else:
        delta = x_adv - x
        dist = _view(delta.flatten(1).norm(dim=1), x)
        scale = torch.clamp(epsilon / torch.clamp(dist, min=_DIVISION_FLOOR), max=1.0)
        x_adv = x + delta * scale
    if is_image:
        x_adv = x_adv.clamp(0.0, 1.0)
    return x_adv


def _random_start(x: torch.Tensor, norm: Norm, epsilon: float, generator: torch.Generator) -> torch.Tensor:
    if norm == Norm.LINF:
        u = torch.rand(x.shape, generator=generator, dtype=x.dtype)
        return x + (2 * u - 1) * epsilon
    direction = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    direction = direction / _view(torch.clamp(direction.flatten(1).norm(dim=1), min=_DIVISION_FLOOR), x)
    radius = epsilon * torch.rand(x.shape[0], generator=generator, dtype=x.dtype)
    return x + direction * _view(radius, x)


def _loss_grad(model, x_adv: torch.Tensor, y: torch.Tensor, iteration: int) -> torch.Tensor:
    x_adv = x_adv.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(model.forward(x_adv), y, reduction='sum')
    grad, = torch.autograd.grad(loss, x_adv)
    if not torch.isfinite(grad).all():
        logger.error(f"Non-finite attack gradient at iteration {iteration}")
        raise NumericalFailureError(f"Non-finite attack gradient at iteration {iteration}")
    return grad.to(x_adv.dtype)


def _ascent(x_adv, grad, norm: Norm, step_size: float):
    if norm == Norm.LINF:
        return x_adv + step_size * torch.sign(grad)
    grad_norm = _view(torch.clamp(grad.flatten(1).norm(dim=1), min=_DIVISION_FLOOR), grad)
    return x_adv + step_size * grad / grad_norm


def _result(model, x, x_adv, y, steps_used, norm, epsilon) -> AttackResult:
    with torch.no_grad():
        clean_pred = predict_labels(model, x)
        adv_pred = predict_labels(model, x_adv)
    return AttackResult(
        adversarial=x_adv.detach(),
        success=adv_pred != y,
        norms=perturbation_norms(x_adv - x, norm),
        steps_used=steps_used,
        labels=y,
        clean_predictions=clean_pred,
        adversarial_predictions=adv_pred,
        norm=Norm(norm),
        epsilon=float(epsilon),
    )


# ============================================================================
# ATTACKS
# ============================================================================

def fgsm(model, x: torch.Tensor, y: torch.Tensor, epsilon: float) -> AttackResult:
    """x_adv = clip(x + eps * sign(grad_x J)). The l_inf norm of the perturbation is at most eps."""
    _check_inputs(x, y)
    if epsilon < 0:
        raise ArgumentError(f"epsilon must be >= 0, got {epsilon}")
    x = x.detach()
    is_image = x.ndim == 4
    x_adv = x + epsilon * torch.sign(_loss_grad(model, x, y, 1))
    if is_image:
        x_adv = x_adv.clamp(0.0, 1.0)
    return _result(model, x, x_adv, y, 1, Norm.LINF, epsilon)


def _pgd_loop(model, x, y, spec: AttackSpec, seed: int) -> AttackResult:
    _check_inputs(x, y)
    x = x.detach()
    is_image = x.ndim == 4
    if spec.epsilon == 0:
        return _result(model, x, x.clone(), y, 0, spec.norm, 0.0)

    generator = make_generator(seed)
    x_adv = x.clone()
    if spec.random_start:
        x_adv = project(_random_start(x, spec.norm, spec.epsilon, generator), x, spec.norm, spec.epsilon, is_image)

    step_size = spec.resolved_step_size
    for iteration in range(1, spec.steps + 1):
        grad = _loss_grad(model, x_adv, y, iteration)
        x_adv = project(_ascent(x_adv, grad, spec.norm, step_size), x, spec.norm, spec.epsilon, is_image).detach()
        logger.debug(f"pgd iteration {iteration}/{spec.steps}")
    return _result(model, x, x_adv, y, spec.steps, spec.norm, spec.epsilon)


def pgd(model, x: torch.Tensor, y: torch.Tensor, spec: AttackSpec, seed: int) -> AttackResult:
    """Projected gradient ascent on the classifier's cross-entropy. Deterministic per seed."""
    result = _pgd_loop(model, x, y, spec, seed)
    logger.info(f"PGD {spec.norm.value} eps={spec.epsilon:.4f}: success rate {result.success_rate:.3f}")
    return result


def adaptive_pgd(pipeline, x: torch.Tensor, y: torch.Tensor, spec: AttackSpec, seed: int) -> AttackResult:
    """PGD against the end-to-end map purifier -> classifier using exact autograd gradients.

    The pipeline must be deterministic (fixed internal seeds) and differentiable;
    a non-finite gradient inside a reverse step surfaces as NumericalFailureError
    naming that step.
    """
    if not getattr(pipeline, 'differentiable', True):
        raise UnsupportedModeError('adaptive_pgd', "pipeline is not in differentiable mode")
    result = _pgd_loop(pipeline, x, y, spec, seed)
    logger.info(f"Adaptive PGD {spec.norm.value} eps={spec.epsilon:.4f}: success rate {result.success_rate:.3f}")
    return result


def transfer_success_rate(pipeline, result: AttackResult) -> float:
    """Success rate of an already-crafted adversarial batch against another predictor."""
    with torch.no_grad():
        predictions = predict_labels(pipeline, result.adversarial)
    return float((predictions != result.labels).to(torch.float64).mean())


def save_attack_result(result: AttackResult, stem, class_count: int):
    """JSON-lines per-sample records plus the adversarial array in the dataset format."""
    records_path = serialization.write_jsonl(f"{stem}.jsonl", result.to_records())
    dataset = LabeledDataset(result.adversarial.to(torch.float32), result.labels, class_count,
                             f"adversarial-{result.norm.value}", 0)
    save_dataset(dataset, stem)
    return records_path


__all__ = [
    'Norm',
    'AttackSpec',
    'AttackResult',
    'perturbation_norms',
    'project',
    'fgsm',
    'pgd',
    'adaptive_pgd',
    'transfer_success_rate',
    'save_attack_result',
]
