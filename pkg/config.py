"""
config.py

Constants for every stage of the purification toolkit plus the YAML-backed
experiment configuration consumed by the harness and the CLI.

Example:
    config = load_config("experiment.yaml")
    config = with_overrides(config, seed=7, output_dir="runs/seed7")
"""
import dataclasses
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import yaml

from exceptions import ConfigurationError

logger = logging.getLogger(__name__)


# ============================================================================
# CONSTANTS
# ============================================================================

class DataConfig:
    """Synthetic data geometry and the corruption severity tables."""
    SHAPE_CLASSES = ('square', 'disk', 'triangle')
    MIN_IMAGE_SIDE = 12
    SHAPE_MIN_SCALE = 0.35
    SHAPE_MAX_SCALE = 0.6
    SHAPE_MAX_AREA_RATIO = SHAPE_MAX_SCALE ** 2
    SHAPE_MIN_INTENSITY = 0.55
    SHAPE_MAX_INTENSITY = 1.0
    MIXTURE_RADIUS = 1.0

    # index 0 is severity 1
    GAUSSIAN_NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
    SHOT_NOISE_SCALE = (60, 25, 12, 5, 3)
    IMPULSE_NOISE_PROB = (0.01, 0.03, 0.06, 0.10, 0.17)
    GLASS_BLUR_PARAMS = ((1, 1), (1, 2), (2, 2), (2, 3), (3, 3))
    JPEG_QUANT_STEP = (0.05, 0.10, 0.18, 0.30, 0.45)
    JPEG_BLOCK = 4
    MAX_SEVERITY = 5

    SAMPLE_DTYPE = 'f32le'
    LABEL_DTYPE = 'i32le'


class ClassifierConfig:
    MLP_HIDDEN = 64
    MLP_DEPTH = 2
    CONV_CHANNELS = (8, 16)
    CONV_KERNEL = 3
    LEARNING_RATE = 0.05
    BATCH_SIZE = 64
    EVAL_BATCH_SIZE = 512


class DiffusionConfig:
    T = 200
    BETA_START = 1e-4
    BETA_END = 0.05
    POINT_NET_WIDTH = 128
    POINT_NET_DEPTH = 3
    TIME_EMBED_DIM = 32
    IMAGE_NET_CHANNELS = (16, 32, 64)
    LEARNING_RATE = 1e-3
    BATCH_SIZE = 128


class GuidanceDefaults:
    T_STAR_FRACTION = 0.3
    SCALE = 1.0
    PHI = 0.5
    DISTANCE = 'logit_l2_plus_ssim'
    POINT_DISTANCE = 'logit_l2_only'


class AttackDefaults:
    LINF_EPSILON = 8 / 255
    L2_EPSILON = 128 / 255
    STEPS = 40
    LINF_STEP_FRACTION = 0.25
    L2_STEP_FACTOR = 2.0
    BUDGET_TOLERANCE = 1e-6


class CertificationDefaults:
    N0 = 100
    N = 1000
    ALPHA = 0.01
    SIGMA = 0.25
    QUANTILE_CLAMP = 1e-12
    ABSTAIN = -1
    BATCH_SIZE = 500


class MetricConfig:
    SSIM_WINDOW = 7
    SSIM_SIGMA = 1.5
    SSIM_K1 = 0.01
    SSIM_K2 = 0.03
    DATA_RANGE = 1.0
    PSNR_CAP = 99.0
    PERTURBATION_AMPLIFICATION = 10.0
    PANEL_OFFSET = 0.5


class HarnessConfig:
    EXIT_OK = 0
    EXIT_CONFIGURATION = 2
    EXIT_NUMERICAL = 3
    EXIT_ACCEPTANCE = 4

    # directional thresholds, accuracy points as fractions
    MIN_DEFENSE_GAIN = 0.30
    MAX_CLEAN_DROP = 0.15
    MIN_SWEEP_GAIN = 0.20
    MIN_ADAPTIVE_GAIN = 0.40
    MIN_OOD_GAIN = 0.10
    MIN_QUALITY_SSIM = 0.6
    MONOTONE_VIOLATIONS = 2
    MONOTONE_SLACK = 0.02

    EPSILON_GRID = (0.0, 4 / 255, 8 / 255, 16 / 255, 24 / 255, 32 / 255, 48 / 255, 64 / 255, 80 / 255)
    T_STAR_FRACTIONS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.45, 0.6, 0.8, 1.0)

    GRID_FORMAT = 'png'
    PLOT_FORMAT = 'svg'
    MISSING_CELL = '-'
    GRID_COLUMNS = 8

    # shard size for attacks through the differentiable pipeline
    ADAPTIVE_BATCH_SIZE = 20


# ============================================================================
# EXPERIMENT SETTINGS
# ============================================================================

@dataclass(frozen=True)
class DatasetSettings:
    kind: str = 'shapes'
    n_per_class: int = 200
    eval_per_class: int = 100
    side: int = 16
    n_classes: int = 4
    spread: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class ClassifierSettings:
    arch: str = 'small_conv'
    epochs: int = 30
    checkpoints: tuple = ('checkpoints/classifier',)


@dataclass(frozen=True)
class DiffusionSettings:
    T: int = DiffusionConfig.T
    beta_start: float = DiffusionConfig.BETA_START
    beta_end: float = DiffusionConfig.BETA_END
    epochs: int = 200
    batch_size: int = DiffusionConfig.BATCH_SIZE
    learning_rate: float = DiffusionConfig.LEARNING_RATE
    checkpoint: str = 'checkpoints/diffusion'


@dataclass(frozen=True)
class AttackSettings:
    name: str
    norm: str
    epsilon: float
    steps: int = AttackDefaults.STEPS
    step_size: Optional[float] = None


@dataclass(frozen=True)
class GuidanceSettings:
    t_star_fraction: float = GuidanceDefaults.T_STAR_FRACTION
    scale: float = GuidanceDefaults.SCALE
    phi: float = GuidanceDefaults.PHI
    distance: str = GuidanceDefaults.DISTANCE
    literal_ssim_sign: bool = False
    fresh_reference_noise: bool = False
    use_probabilities: bool = False


@dataclass(frozen=True)
class CertificationSettings:
    sigma: float = CertificationDefaults.SIGMA
    n0: int = CertificationDefaults.N0
    n: int = CertificationDefaults.N
    alpha: float = CertificationDefaults.ALPHA
    n_points: int = 20
    delta: float = 0.0
    c_alpha: float = 1.0
    c_s: float = 1.0


@dataclass(frozen=True)
class SweepSettings:
    epsilon_grid: tuple = HarnessConfig.EPSILON_GRID
    t_star_fractions: tuple = HarnessConfig.T_STAR_FRACTIONS
    norms: tuple = ('linf', 'l2')
    joint: bool = False


def _default_attacks():
    return (
        AttackSettings(name='pgd_linf', norm='linf', epsilon=AttackDefaults.LINF_EPSILON),
        AttackSettings(name='pgd_l2', norm='l2', epsilon=AttackDefaults.L2_EPSILON),
    )


def steps_for_fraction(fraction: float, T: int) -> int:
    """floor(fraction * T), computed on the decimal value so that 0.57 of 100 is 57."""
    return math.floor(Fraction(str(fraction)) * T)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    classifier: ClassifierSettings = field(default_factory=ClassifierSettings)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    attacks: tuple = field(default_factory=_default_attacks)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    certification: CertificationSettings = field(default_factory=CertificationSettings)
    sweeps: SweepSettings = field(default_factory=SweepSettings)
    seed: int = 0
    output_dir: str = 'runs/default'
    eval_samples: int = 300
    batch_size: int = 100
    workers: int = 1

    def t_star(self, T: Optional[int] = None) -> int:
        """Forward depth in steps for the configured fraction of T."""
        T = self.diffusion.T if T is None else T
        return steps_for_fraction(self.guidance.t_star_fraction, T)


# ============================================================================
# LOADING
# ============================================================================

def parse_real(value, name: str = 'value') -> float:
    """Accept plain numbers or fraction strings such as "8/255"."""
    if isinstance(value, bool):
        raise ConfigurationError(f"Expected a real number for '{name}', got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(' ', '')))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigurationError(f"Cannot parse '{value}' for '{name}'", original_error=e) from e
    raise ConfigurationError(f"Expected a real number for '{name}', got {type(value).__name__}")


_FRACTION = re.compile(r'^\s*[-+]?[0-9.eE+-]+\s*/\s*[0-9.eE+-]+\s*$')
_REAL_TYPES = (float, Optional[float])


def _coerce_item(value, name: str):
    if isinstance(value, str) and _FRACTION.match(value):
        return parse_real(value, name)
    return value


def _build(cls, raw, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"Section '{section}' must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown keys in '{section}': {unknown}")
    values = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(_coerce_item(v, f"{section}.{key}") for v in value)
        elif known[key].type in _REAL_TYPES and value is not None:
            value = parse_real(value, f"{section}.{key}")
        values[key] = value
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"Invalid section '{section}': {e}", original_error=e) from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("Configuration root must be a mapping")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"Unknown top-level keys: {unknown}")

    attacks = raw.get('attacks')
    if attacks is None:
        attacks = _default_attacks()
    else:
        attacks = tuple(_build(AttackSettings, a, 'attacks') for a in attacks)

    scalars = {k: raw[k] for k in ('seed', 'output_dir', 'eval_samples', 'batch_size', 'workers') if k in raw}
    config = ExperimentConfig(
        dataset=_build(DatasetSettings, raw.get('dataset'), 'dataset'),
        classifier=_build(ClassifierSettings, raw.get('classifier'), 'classifier'),
        diffusion=_build(DiffusionSettings, raw.get('diffusion'), 'diffusion'),
        attacks=attacks,
        guidance=_build(GuidanceSettings, raw.get('guidance'), 'guidance'),
        certification=_build(CertificationSettings, raw.get('certification'), 'certification'),
        sweeps=_build(SweepSettings, raw.get('sweeps'), 'sweeps'),
        **scalars,
    )
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    """Check invariants that the dataclasses alone cannot express."""
    if not isinstance(config.seed, int):
        raise ConfigurationError("An explicit integer 'seed' is required")
    if not config.sweeps.epsilon_grid or not config.sweeps.t_star_fractions:
        raise ConfigurationError("Sweep grids must be nonempty")
    if not 0.0 <= config.guidance.t_star_fraction <= 1.0:
        raise ConfigurationError("guidance.t_star_fraction must lie in [0, 1]")
    if any(not 0.0 <= f <= 1.0 for f in config.sweeps.t_star_fractions):
        raise ConfigurationError("sweeps.t_star_fractions must lie in [0, 1]")
    if config.dataset.kind not in ('shapes', 'mixture'):
        raise ConfigurationError(f"Unknown dataset kind '{config.dataset.kind}'")
    if not config.classifier.checkpoints:
        raise ConfigurationError("classifier.checkpoints must name at least one checkpoint")
    if config.workers < 1:
        raise ConfigurationError("workers must be >= 1")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError("Configuration file not found", path=path)
    try:
        with open(path, 'r') as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError("Malformed YAML configuration", path=path, original_error=e) from e
    try:
        config = config_from_dict(raw)
    except ConfigurationError as e:
        raise ConfigurationError(str(e), path=path, original_error=e.original_error) from e
    logger.info(f"Loaded configuration from {path} (seed={config.seed})")
    return config


def with_overrides(config: ExperimentConfig, seed=None, output_dir=None, workers=None) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes['seed'] = int(seed)
    if output_dir is not None:
        changes['output_dir'] = str(output_dir)
    if workers is not None:
        changes['workers'] = int(workers)
    config = dataclasses.replace(config, **changes)
    validate_config(config)
    return config


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, default=list)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


__all__ = [
    'DataConfig',
    'ClassifierConfig',
    'DiffusionConfig',
    'GuidanceDefaults',
    'AttackDefaults',
    'CertificationDefaults',
    'MetricConfig',
    'HarnessConfig',
    'DatasetSettings',
    'ClassifierSettings',
    'DiffusionSettings',
    'AttackSettings',
    'GuidanceSettings',
    'CertificationSettings',
    'SweepSettings',
    'ExperimentConfig',
    'steps_for_fraction',
    'parse_real',
    'config_from_dict',
    'validate_config',
    'load_config',
    'with_overrides',
    'config_to_dict',
    'config_hash',
]
