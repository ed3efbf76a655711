"""
diffusion.py

Denoising diffusion core with the epsilon-parameterisation.

Steps are 1-based throughout: t = 1..T, and array index t - 1 holds the
coefficients of step t.

- make_schedule: linear beta schedule with alpha, alpha_bar and posterior variances
- forward_sample: closed-form q(x_t | x_0)
- forward_chain: t sequential q(x_s | x_{s-1}) steps
- train_diffusion: minimise E||eps - eps_net(x_t, t)||^2
- reverse_step / sample: unguided ancestral sampling, no noise at t = 1

Example:
    schedule = make_schedule(200, 1e-4, 0.05)
    model = train_diffusion(train, schedule, epochs=200, seed=0)
    x_t = forward_sample(schedule, x0, 60, noise)
    x_prev = reverse_step(model, x_t, 60, seed=1)
"""
import copy
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

import serialization
from config import DataConfig, DiffusionConfig
from exceptions import ArgumentError, ConfigurationError, EmptyDatasetError, TrainingFailureError
from seeding import derive_seed, make_generator, seeded_init

logger = logging.getLogger(__name__)


# ============================================================================
# NOISE SCHEDULE
# ============================================================================

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """beta, alpha = 1 - beta, alpha_bar = cumprod(alpha) and posterior variances (float64)."""
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    posterior_var: torch.Tensor

    @classmethod
    def from_betas(cls, beta) -> 'NoiseSchedule':
        beta = torch.as_tensor(beta, dtype=torch.float64).reshape(-1)
        if beta.numel() < 2:
            raise ArgumentError(f"A schedule needs T >= 2 steps, got {beta.numel()}")
        if bool((beta <= 0).any()) or bool((beta >= 1).any()):
            raise ArgumentError("Every beta must lie in (0, 1)")
        if not bool((beta[1:] > beta[:-1]).all()):
            raise ArgumentError("beta must be strictly increasing")
        alpha = 1.0 - beta
        alpha_bar = torch.cumprod(alpha, dim=0)
        alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        return cls(beta.numel(), beta, alpha, alpha_bar, posterior_var)

    def check_step(self, t: int):
        if not 1 <= int(t) <= self.T:
            raise ArgumentError(f"Step t={t} outside [1, {self.T}]")
        return int(t) - 1

    def to_manifest(self) -> dict:
        return {'T': self.T, 'beta': [float(b) for b in self.beta]}


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear interpolation of beta from beta_start to beta_end over T steps."""
    if T < 2:
        raise ArgumentError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ArgumentError(f"Need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule.from_betas(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


def default_schedule() -> NoiseSchedule:
    return make_schedule(DiffusionConfig.T, DiffusionConfig.BETA_START, DiffusionConfig.BETA_END)


# ============================================================================
# FORWARD PROCESS
# ============================================================================

def _coef(values: torch.Tensor, index, like: torch.Tensor) -> torch.Tensor:
    """Schedule entries broadcast against a batch."""
    out = values[index].to(like.dtype)
    if out.ndim == 1:
        out = out.view(-1, *([1] * (like.ndim - 1)))
    return out


def forward_sample(schedule: NoiseSchedule, x0: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise, evaluated exactly, no clamping."""
    index = schedule.check_step(t)
    if noise.shape != x0.shape:
        raise ArgumentError(f"Noise shape {tuple(noise.shape)} does not match x0 {tuple(x0.shape)}")
    alpha_bar = schedule.alpha_bar[index]
    return (torch.sqrt(alpha_bar).to(x0.dtype) * x0
            + torch.sqrt(1.0 - alpha_bar).to(x0.dtype) * noise)


def _forward_sample_batch(schedule: NoiseSchedule, x0, steps: torch.Tensor, noise):
    index = steps - 1
    return (_coef(torch.sqrt(schedule.alpha_bar), index, x0) * x0
            + _coef(torch.sqrt(1.0 - schedule.alpha_bar), index, x0) * noise)


def forward_chain(schedule: NoiseSchedule, x0: torch.Tensor, t: int, seed: int) -> torch.Tensor:
    """Iterate x_s = sqrt(alpha_s) x_{s-1} + sqrt(beta_s) z_s for s = 1..t."""
    schedule.check_step(t)
    generator = make_generator(seed)
    x = x0
    for s in range(t):
        z = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        x = torch.sqrt(schedule.alpha[s]).to(x0.dtype) * x + torch.sqrt(schedule.beta[s]).to(x0.dtype) * z
    return x


# ============================================================================
# NOISE-PREDICTION NETWORKS
# ============================================================================

def timestep_embedding(steps: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = steps.to(torch.float64).view(-1, 1) * freqs.view(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)


class PointEpsNet(nn.Module):
    """MLP on [x, emb(t)] for point data."""

    def __init__(self, dim: int, width: int = DiffusionConfig.POINT_NET_WIDTH,
                 depth: int = DiffusionConfig.POINT_NET_DEPTH, embed_dim: int = DiffusionConfig.TIME_EMBED_DIM):
        super().__init__()
        self.embed_dim = embed_dim
        layers, fan_in = [], dim + embed_dim
        for _ in range(depth):
            layers += [nn.Linear(fan_in, width), nn.SiLU()]
            fan_in = width
        layers.append(nn.Linear(width, dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x, steps):
        emb = timestep_embedding(steps, self.embed_dim, x.dtype)
        return self.net(torch.cat([x, emb], dim=1))


class _Block(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.time = nn.Linear(embed_dim, out_channels)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.conv1(x) + self.time(emb)[:, :, None, None])
        return F.silu(self.conv2(h)) + self.skip(x)


class ImageEpsNet(nn.Module):
    """Three-level encoder-decoder with skip connections; the time embedding enters every level."""

    def __init__(self, channels: int = 1, widths=DiffusionConfig.IMAGE_NET_CHANNELS,
                 embed_dim: int = DiffusionConfig.TIME_EMBED_DIM):
        super().__init__()
        w1, w2, w3 = widths
        self.embed_dim = embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.SiLU())
        self.enc1 = _Block(channels, w1, embed_dim)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = _Block(w2, w2, embed_dim)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.mid = _Block(w3, w3, embed_dim)
        self.up2 = nn.Conv2d(w3, w2, 3, padding=1)
        self.dec2 = _Block(2 * w2, w2, embed_dim)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.dec1 = _Block(2 * w1, w1, embed_dim)
        self.out = nn.Conv2d(w1, channels, 3, padding=1)

    def forward(self, x, steps):
        emb = self.time_mlp(timestep_embedding(steps, self.embed_dim, x.dtype))
        h1 = self.enc1(x, emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.mid(self.down2(h2), emb)
        u2 = self.up2(F.interpolate(h3, size=h2.shape[-2:], mode='nearest'))
        d2 = self.dec2(torch.cat([u2, h2], dim=1), emb)
        u1 = self.up1(F.interpolate(d2, size=h1.shape[-2:], mode='nearest'))
        d1 = self.dec1(torch.cat([u1, h1], dim=1), emb)
        return self.out(d1)


def build_eps_net(sample_shape: tuple) -> nn.Module:
    if len(sample_shape) == 1:
        return PointEpsNet(sample_shape[0])
    if len(sample_shape) == 3:
        return ImageEpsNet(sample_shape[0])
    raise ArgumentError(f"No noise-prediction network for sample shape {sample_shape}")


# ============================================================================
# MODEL
# ============================================================================

@dataclass(eq=False)
class DiffusionModel:
    """A trained noise-prediction network and its schedule. Immutable after training."""
    schedule: NoiseSchedule
    eps_net: nn.Module
    sample_shape: tuple
    seed: int = 0
    epoch_losses: list = field(default_factory=list)

    def __post_init__(self):
        self.eps_net.eval()
        self.eps_net.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.eps_net.parameters()).dtype

    def parameters(self) -> dict:
        return {name: p.detach() for name, p in self.eps_net.state_dict().items()}

    def predict_noise(self, x_t: torch.Tensor, t) -> torch.Tensor:
        """eps_net(x_t, t), differentiable in x_t; t is an int or a (B,) tensor of steps."""
        if tuple(x_t.shape[1:]) != tuple(self.sample_shape):
            raise ArgumentError(f"x_t shape {tuple(x_t.shape)} does not match sample shape {self.sample_shape}")
        steps = torch.full((x_t.shape[0],), int(t), dtype=torch.int64) if not torch.is_tensor(t) else t
        return self.eps_net(x_t.to(self.dtype), steps).to(x_t.dtype)

    def double(self) -> 'DiffusionModel':
        return DiffusionModel(self.schedule, copy.deepcopy(self.eps_net).double(),
                              self.sample_shape, self.seed, list(self.epoch_losses))


def train_diffusion(data, schedule: NoiseSchedule, epochs: int, seed: int,
                    batch_size: int = DiffusionConfig.BATCH_SIZE,
                    learning_rate: float = DiffusionConfig.LEARNING_RATE) -> DiffusionModel:
    """Fit eps_net by minimising E||eps - eps_net(x_t, t)||^2 with Adam. Deterministic per seed."""
    if len(data) == 0:
        raise EmptyDatasetError()
    if epochs < 1:
        raise ArgumentError(f"epochs must be >= 1, got {epochs}")

    with seeded_init(seed):
        net = build_eps_net(data.sample_shape)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=learning_rate)
    generator = make_generator(derive_seed(seed, 'diffusion-train'))
    x_all = data.samples

    epoch_losses = []
    for epoch in range(1, epochs + 1):
        order = torch.randperm(len(data), generator=generator)
        total, count = 0.0, 0
        for start in range(0, len(data), batch_size):
            x0 = x_all[order[start:start + batch_size]]
            steps = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=generator)
            noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
            x_t = _forward_sample_batch(schedule, x0, steps, noise)
            loss = F.mse_loss(net(x_t, steps), noise)
            if not torch.isfinite(loss):
                logger.error(f"Diffusion loss became non-finite at epoch {epoch}")
                raise TrainingFailureError(epoch, float(loss), 'diffusion model')
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * x0.shape[0]
            count += x0.shape[0]
        epoch_losses.append(total / count)
        if epoch == 1 or epoch % 25 == 0 or epoch == epochs:
            logger.info(f"diffusion epoch {epoch}/{epochs}: loss={epoch_losses[-1]:.4f}")

    return DiffusionModel(schedule, net, data.sample_shape, seed, epoch_losses)


# ============================================================================
# REVERSE PROCESS
# ============================================================================

def reverse_mean(model: DiffusionModel, x_t: torch.Tensor, t: int) -> torch.Tensor:
    """mu_theta(x_t, t) = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_net(x_t, t)) / sqrt(alpha_t); differentiable."""
    index = model.schedule.check_step(t)
    s = model.schedule
    eps = model.predict_noise(x_t, t)
    coef = (s.beta[index] / torch.sqrt(1.0 - s.alpha_bar[index])).to(x_t.dtype)
    return (x_t - coef * eps) / torch.sqrt(s.alpha[index]).to(x_t.dtype)


def reverse_noise(x_t: torch.Tensor, seed: int) -> torch.Tensor:
    """The standard-normal draw used by a reverse step with this seed."""
    return torch.randn(x_t.shape, generator=make_generator(seed), dtype=x_t.dtype)


def posterior_std(schedule: NoiseSchedule, t: int) -> torch.Tensor:
    return torch.sqrt(schedule.posterior_var[schedule.check_step(t)])


def reverse_step(model: DiffusionModel, x_t: torch.Tensor, t: int, seed: int) -> torch.Tensor:
    """Sample N(mu_theta(x_t, t), posterior_var_t * I); the final step t = 1 adds no noise."""
    model.schedule.check_step(t)
    with torch.no_grad():
        mean = reverse_mean(model, x_t, t)
        if t == 1:
            return mean
        return mean + posterior_std(model.schedule, t).to(x_t.dtype) * reverse_noise(x_t, seed)


def sample(model: DiffusionModel, n: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Full unguided reverse chain from x_T ~ N(0, I)."""
    generator = make_generator(seed)
    x = torch.randn((n,) + tuple(model.sample_shape), generator=generator, dtype=dtype)
    for t in range(model.schedule.T, 0, -1):
        x = reverse_step(model, x, t, derive_seed(seed, 'sample', t))
    return x


def energy_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """Two-sample energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic)."""
    a = a.to(torch.float64).flatten(1)
    b = b.to(torch.float64).flatten(1)
    return float(2 * torch.cdist(a, b).mean() - torch.cdist(a, a).mean() - torch.cdist(b, b).mean())


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_diffusion(model: DiffusionModel, stem):
    """JSON manifest (schedule included) + f32le parameter blobs in manifest order."""
    entries, chunks, offset = [], [], 0
    for name, tensor in model.parameters().items():
        blob = serialization.encode(tensor.cpu().numpy(), DataConfig.SAMPLE_DTYPE)
        entries.append({'name': name, 'shape': list(tensor.shape), 'offset': offset})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        'kind': 'diffusion',
        'sample_shape': list(model.sample_shape),
        'schedule': model.schedule.to_manifest(),
        'seed': model.seed,
        'epoch_losses': list(model.epoch_losses),
        'dtype': DataConfig.SAMPLE_DTYPE,
        'parameters': entries,
    }
    return serialization.write_pair(stem, manifest, b''.join(chunks))


def load_diffusion(stem) -> DiffusionModel:
    manifest, payload = serialization.read_pair(stem)
    if manifest.get('kind') != 'diffusion':
        raise ConfigurationError("Not a diffusion checkpoint", path=stem)
    sample_shape = tuple(manifest['sample_shape'])
    net = build_eps_net(sample_shape)
    state = {
        e['name']: torch.from_numpy(serialization.decode(payload, manifest['dtype'], e['offset'], tuple(e['shape'])))
        for e in manifest['parameters']
    }
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigurationError("Checkpoint does not match network", path=stem, original_error=e) from e
    schedule = NoiseSchedule.from_betas(manifest['schedule']['beta'])
    logger.info(f"Loaded diffusion model from {stem} (T={schedule.T})")
    return DiffusionModel(schedule, net, sample_shape, manifest['seed'], manifest.get('epoch_losses', []))


__all__ = [
    'NoiseSchedule',
    'make_schedule',
    'default_schedule',
    'forward_sample',
    'forward_chain',
    'timestep_embedding',
    'PointEpsNet',
    'ImageEpsNet',
    'build_eps_net',
    'DiffusionModel',
    'train_diffusion',
    'reverse_mean',
    'reverse_noise',
    'posterior_std',
    'reverse_step',
    'sample',
    'energy_distance',
    'save_diffusion',
    'load_diffusion',
]
