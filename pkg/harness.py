"""
harness.py

Experiment orchestration at desk scale.

Every experiment is a pure function of an ExperimentConfig: datasets are
regenerated from their seeds, checkpoints are only read, and each cell draws
its randomness from derive_seed(master_seed, *cell identifiers) so adding
cells never shifts the randomness of existing ones.

- run_defense_eval: clean / l_inf / l_2 accuracy with and without purification
- run_epsilon_sweep: accuracy vs epsilon for both norms
- run_tstar_sweep: clean and adversarial accuracy vs t* (plus the joint grid)
- run_adaptive_eval: exact-gradient PGD through the whole pipeline
- run_ood_eval: 5 corruption families x 5 severities
- run_quality_eval: SSIM / PSNR of purified samples and image grids
- check_acceptance: directional thresholds for --check mode
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

import reporting
import serialization
from attacks import AttackSpec, Norm, adaptive_pgd, pgd, save_attack_result
from certification import ExtendedRadiusParams, certify
from classifier import load_classifier, save_classifier, train_classifier
from config import DataConfig, HarnessConfig, MetricConfig, steps_for_fraction
from datasets import CorruptionFamily, CorruptionSpec, corrupt, load_dataset, make_dataset, save_dataset
from diffusion import energy_distance, load_diffusion, make_schedule, sample, save_diffusion, train_diffusion
from exceptions import ArgumentError, ConfigurationError, UnsupportedShapeError
from metrics import MetricReport, accuracy, feature_distance, psnr_batch, ssim_batch
from purifier import GuidanceConfig, PurifiedClassifier, purify_batches
from seeding import derive_seed

logger = logging.getLogger(__name__)


# ============================================================================
# RESULT ROWS
# ============================================================================

@dataclass(frozen=True)
class ResultRow:
    """One metric value of one experiment cell. Identifiers are never null."""
    experiment: str
    dataset: str
    model: str
    metric: str
    value: float
    n: int
    stderr: float = 0.0
    attack: str = 'clean'
    defense: bool = False
    epsilon: float = 0.0
    t_star: int = 0
    corruption: str = 'none'
    severity: int = 0

    def __post_init__(self):
        for name in ('experiment', 'dataset', 'model', 'metric', 'attack', 'corruption'):
            if not getattr(self, name):
                raise ArgumentError(f"Result row identifier '{name}' is empty")
        if not math.isfinite(self.value) or not math.isfinite(self.stderr):
            raise ArgumentError(f"Non-finite value in result row {self.experiment}/{self.metric}")
        if self.n < 1:
            raise ArgumentError("Result rows need n >= 1")

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in reporting.ROW_FIELDS}

    @classmethod
    def from_record(cls, record: dict) -> 'ResultRow':
        return cls(**{name: record[name] for name in reporting.ROW_FIELDS})


def _accuracy_row(value: float, n: int, **cell) -> ResultRow:
    stderr = math.sqrt(max(value * (1 - value), 0.0) / n)
    return ResultRow(metric='accuracy', value=float(value), n=n, stderr=stderr, **cell)


def run_cells(fn, cells, workers: int = 1) -> list:
    """Map fn over independent cells with a bounded pool; results keep cell order."""
    cells = list(cells)
    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, cells))
    else:
        results = [fn(cell) for cell in cells]
    rows = []
    for result in results:
        rows.extend(result)
    return rows


# ============================================================================
# CONTEXT
# ============================================================================

def _require(stem) -> None:
    for path in serialization.pair_paths(stem):
        if not path.exists():
            raise ConfigurationError("Missing checkpoint", path=path)


def model_name(stem) -> str:
    return Path(stem).name


@dataclass(eq=False)
class ExperimentContext:
    """Loaded checkpoints plus the evaluation batch shared by all experiments."""
    config: object
    diffusion: object
    classifiers: dict
    eval_data: object
    checkpoint_hashes: dict = field(default_factory=dict)

    @classmethod
    def load(cls, config) -> 'ExperimentContext':
        """Raises ConfigurationError naming the path of any missing checkpoint."""
        hashes = {}
        _require(config.diffusion.checkpoint)
        diffusion = load_diffusion(config.diffusion.checkpoint)
        hashes[config.diffusion.checkpoint] = serialization.pair_sha256(config.diffusion.checkpoint)

        classifiers = {}
        for stem in config.classifier.checkpoints:
            _require(stem)
            classifiers[model_name(stem)] = load_classifier(stem)
            hashes[stem] = serialization.pair_sha256(stem)

        eval_data = make_dataset(config.dataset, 'eval').subset(config.eval_samples)
        if tuple(diffusion.sample_shape) != eval_data.sample_shape:
            raise ConfigurationError(
                f"Diffusion model shape {diffusion.sample_shape} does not match data {eval_data.sample_shape}",
                path=config.diffusion.checkpoint)
        for name, clf in classifiers.items():
            if tuple(clf.input_shape) != eval_data.sample_shape:
                raise ConfigurationError(f"Classifier '{name}' does not match the data shape")
        logger.info(f"Context: {len(classifiers)} classifier(s), T={diffusion.schedule.T}, "
                    f"{len(eval_data)} evaluation samples")
        return cls(config, diffusion, classifiers, eval_data, hashes)

    @property
    def dataset_name(self) -> str:
        return self.config.dataset.kind

    def t_star(self, fraction: Optional[float] = None) -> int:
        fraction = self.config.guidance.t_star_fraction if fraction is None else fraction
        return steps_for_fraction(fraction, self.diffusion.schedule.T)

    def guidance(self, t_star: Optional[int] = None, differentiable: bool = False) -> GuidanceConfig:
        cfg = GuidanceConfig.from_settings(self.config.guidance, self.diffusion.schedule.T,
                                           self.eval_data.is_image, differentiable)
        return cfg if t_star is None else cfg.with_t_star(t_star)

    def pipeline(self, model: str, t_star: Optional[int] = None, differentiable: bool = False,
                 seed: Optional[int] = None, batch_size: Optional[int] = None) -> PurifiedClassifier:
        """f(purify(x)) for one classifier; the default seed depends only on (model, t*)."""
        guidance = self.guidance(t_star, differentiable)
        if seed is None:
            seed = derive_seed(self.config.seed, 'pipeline', model, guidance.t_star)
        return PurifiedClassifier(self.diffusion, self.classifiers[model], guidance, seed,
                                  batch_size or self.config.batch_size)

    def attack_specs(self) -> list:
        return [(a.name, AttackSpec.from_settings(a)) for a in self.config.attacks]

    def linf_attack(self):
        for name, spec in self.attack_specs():
            if spec.norm == Norm.LINF:
                return name, spec
        return 'pgd_linf', AttackSpec.default(Norm.LINF)

    def craft(self, model: str, name: str, spec: AttackSpec):
        """PGD examples against the bare classifier, seeded by (model, attack, norm, epsilon)."""
        seed = derive_seed(self.config.seed, 'attack', model, name, spec.norm.value, spec.epsilon)
        result = pgd(self.classifiers[model], self.eval_data.samples, self.eval_data.labels, spec, seed)
        return self.eval_data.with_samples(result.adversarial, name=f"{self.eval_data.name}+{name}"), result


def _context(config, context):
    return context if context is not None else ExperimentContext.load(config)


def _common(ctx, experiment: str, model: str) -> dict:
    return {'experiment': experiment, 'dataset': ctx.dataset_name, 'model': model}


def _record(artifacts, *paths):
    """Append written paths to the caller's artifact list, if one was passed."""
    if artifacts is not None:
        artifacts.extend(str(p) for p in paths)


# ============================================================================
# DATA AND TRAINING
# ============================================================================

def generate_data(config, out_dir, artifacts: Optional[list] = None) -> dict:
    paths = {}
    for split in ('train', 'eval'):
        dataset = make_dataset(config.dataset, split)
        json_path, bin_path = save_dataset(dataset, Path(out_dir) / 'data' / split)
        _record(artifacts, json_path, bin_path)
        paths[split] = str(json_path)
        logger.info(f"Wrote {split} split: {len(dataset)} samples")
    return paths


def train_classifiers(config, artifacts: Optional[list] = None) -> dict:
    """Train one classifier per configured checkpoint; the i-th uses seed derive(seed, 'classifier', i)."""
    train = make_dataset(config.dataset, 'train')
    test = make_dataset(config.dataset, 'eval')
    reports = {}
    for index, stem in enumerate(config.classifier.checkpoints):
        seed = derive_seed(config.seed, 'classifier', index)
        model, report = train_classifier(train, config.classifier.arch, config.classifier.epochs, seed, test)
        save_classifier(model, stem)
        _record(artifacts, *serialization.pair_paths(stem))
        reports[model_name(stem)] = report
    return reports


def train_diffusion_model(config, out_dir=None, artifacts: Optional[list] = None):
    settings = config.diffusion
    train = make_dataset(config.dataset, 'train')
    schedule = make_schedule(settings.T, settings.beta_start, settings.beta_end)
    model = train_diffusion(train, schedule, settings.epochs, derive_seed(config.seed, 'diffusion'),
                            settings.batch_size, settings.learning_rate)
    save_diffusion(model, settings.checkpoint)
    _record(artifacts, *serialization.pair_paths(settings.checkpoint))
    if out_dir is not None:
        generated = sample(model, min(len(train), 200), derive_seed(config.seed, 'diffusion-sample'))
        reference = train.samples[:generated.shape[0]]
        path = serialization.write_json(Path(out_dir) / 'diffusion_quality.json', {
            'energy_distance': energy_distance(generated, reference),
            'epoch_losses': list(model.epoch_losses),
            'n': int(generated.shape[0]),
        })
        _record(artifacts, path)
    return model


# ============================================================================
# ATTACK / PURIFY / CERTIFY COMMANDS
# ============================================================================

def run_attacks(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> dict:
    """Attack every classifier with every configured attack; returns success rates."""
    ctx = _context(config, context)
    rates = {}
    for model in sorted(ctx.classifiers):
        for name, spec in ctx.attack_specs():
            _, result = ctx.craft(model, name, spec)
            rates[(model, name)] = result.success_rate
            if out_dir is not None:
                stem = Path(out_dir) / 'attacks' / f"{model}_{name}"
                records = save_attack_result(result, stem, ctx.eval_data.class_count)
                _record(artifacts, records, *serialization.pair_paths(stem))
    return rates


def run_purify(config, context=None, out_dir=None, input_stem=None, artifacts: Optional[list] = None):
    """Purify a stored dataset (default: the evaluation split) with the configured guidance."""
    ctx = _context(config, context)
    data = load_dataset(input_stem) if input_stem else ctx.eval_data
    model = sorted(ctx.classifiers)[0]
    guidance = ctx.guidance()
    seed = derive_seed(config.seed, 'purify', data.name)
    purified, traces = purify_batches(ctx.diffusion, ctx.classifiers[model], data.samples, guidance, seed,
                                      config.batch_size, config.workers)
    result = data.with_samples(purified, name=f"{data.name}+purified")
    if out_dir is not None:
        _record(artifacts, *save_dataset(result, Path(out_dir) / 'purified' / 'samples'))
        records, offset = [], 0
        for trace in traces:
            records.extend(trace.to_records(offset))
            offset += trace.output.shape[0] if trace.output is not None else 0
        _record(artifacts, serialization.write_jsonl(Path(out_dir) / 'purified' / 'trace.jsonl', records))
    return result, traces


def run_certification(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> list:
    """Certify f(purify(.)) at the first n_points evaluation samples; records carry both radii."""
    ctx = _context(config, context)
    settings = config.certification
    model = sorted(ctx.classifiers)[0]
    t_star = ctx.t_star()
    pipeline = ctx.pipeline(model, t_star)
    if t_star >= 1:
        extended = ExtendedRadiusParams.from_schedule(ctx.diffusion.schedule, t_star, settings.delta,
                                                      settings.c_alpha, settings.c_s)
    else:
        extended = ExtendedRadiusParams(settings.delta, 0.0, settings.c_alpha, settings.c_s)

    records = []
    count = min(settings.n_points, len(ctx.eval_data))
    for i in range(count):
        x, label = ctx.eval_data.samples[i], int(ctx.eval_data.labels[i])
        record = certify(pipeline, x, settings.sigma, settings.n0, settings.n, settings.alpha,
                         derive_seed(config.seed, 'certify', model, i), extended=extended)
        records.append(record.to_record(index=i, label=label, model=model, t_star=t_star,
                                        correct=record.prediction == label))
        logger.info(f"certify {i + 1}/{count}: class={record.prediction} R={record.radius_cohen:.4f}")
    if out_dir is not None:
        path = serialization.write_jsonl(Path(out_dir) / 'certification' / 'certificates.jsonl', records)
        _record(artifacts, path)
    return records


# ============================================================================
# EXPERIMENTS
# ============================================================================

def _emit(rows, out_dir, name: str, artifacts: Optional[list] = None):
    if out_dir is not None:
        paths = reporting.write_rows(rows, Path(out_dir) / 'results' / name)
        _record(artifacts, paths['rows'], paths['csv'])


def run_defense_eval(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> list:
    """Accuracy on clean and attacked data, without and with purification.

    Emits exactly |models| x (|attacks| + 1) x 2 rows.
    """
    ctx = _context(config, context)
    t_star = ctx.t_star()
    cells = [(m, None) for m in sorted(ctx.classifiers)]
    cells += [(m, a) for m in sorted(ctx.classifiers) for a in ctx.attack_specs()]

    def cell(item):
        model, attack = item
        if attack is None:
            data, name, epsilon = ctx.eval_data, 'clean', 0.0
        else:
            name, spec = attack
            data, _ = ctx.craft(model, name, spec)
            epsilon = spec.epsilon
        common = dict(_common(ctx, 'defense', model), attack=name, epsilon=epsilon)
        return [
            _accuracy_row(accuracy(ctx.classifiers[model], data), len(data), defense=False, **common),
            _accuracy_row(accuracy(ctx.pipeline(model, t_star), data), len(data), defense=True,
                          t_star=t_star, **common),
        ]

    rows = run_cells(cell, cells, config.workers)
    _emit(rows, out_dir, 'defense', artifacts)
    return rows


def run_epsilon_sweep(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> list:
    """Accuracy vs epsilon, with and without defense, for every configured norm."""
    ctx = _context(config, context)
    t_star = ctx.t_star()
    base = AttackSpec.default(Norm.LINF)
    cells = [(m, Norm(norm), eps) for m in sorted(ctx.classifiers)
             for norm in config.sweeps.norms for eps in config.sweeps.epsilon_grid]

    def cell(item):
        model, norm, epsilon = item
        name = f"pgd_{norm.value}"
        data, _ = ctx.craft(model, name, AttackSpec(norm, epsilon, base.steps))
        common = dict(_common(ctx, 'eps_sweep', model), attack=name, epsilon=float(epsilon))
        return [
            _accuracy_row(accuracy(ctx.classifiers[model], data), len(data), defense=False, **common),
            _accuracy_row(accuracy(ctx.pipeline(model, t_star), data), len(data), defense=True,
                          t_star=t_star, **common),
        ]

    rows = run_cells(cell, cells, config.workers)
    _emit(rows, out_dir, 'eps_sweep', artifacts)
    if out_dir is not None:
        frame = reporting.rows_frame(rows)
        for (model, attack), group in frame.groupby(['model', 'attack'], sort=True):
            path = Path(out_dir) / 'plots' / f"eps_sweep_{model}_{attack}.svg"
            reporting.plot_curves(group, 'epsilon', path, f"{model}: accuracy vs epsilon ({attack})")
            _record(artifacts, path)
    return rows


def run_tstar_sweep(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> list:
    """Defended clean and adversarial accuracy over the t* grid; optionally the joint (epsilon, t*) grid."""
    ctx = _context(config, context)
    name, spec = ctx.linf_attack()
    t_grid = sorted({ctx.t_star(f) for f in config.sweeps.t_star_fractions})
    adversarial = {m: ctx.craft(m, name, spec)[0] for m in sorted(ctx.classifiers)}

    def cell(item):
        model, t_star = item
        pipeline = ctx.pipeline(model, t_star)
        common = dict(_common(ctx, 'tstar_sweep', model), defense=True, t_star=t_star)
        return [
            _accuracy_row(accuracy(pipeline, ctx.eval_data), len(ctx.eval_data), attack='clean', **common),
            _accuracy_row(accuracy(pipeline, adversarial[model]), len(ctx.eval_data), attack=name,
                          epsilon=spec.epsilon, **common),
        ]

    rows = run_cells(cell, [(m, t) for m in sorted(ctx.classifiers) for t in t_grid], config.workers)

    joint_rows = []
    if config.sweeps.joint:
        crafted = {(m, eps): ctx.craft(m, name, AttackSpec(Norm.LINF, eps, spec.steps))[0]
                   for m in sorted(ctx.classifiers) for eps in config.sweeps.epsilon_grid}

        def joint_cell(item):
            model, epsilon, t_star = item
            data = crafted[(model, epsilon)]
            return [_accuracy_row(accuracy(ctx.pipeline(model, t_star), data), len(data),
                                  attack=name, epsilon=float(epsilon), defense=True, t_star=t_star,
                                  **_common(ctx, 'joint_sweep', model))]

        joint_rows = run_cells(joint_cell, [(m, e, t) for (m, e) in crafted for t in t_grid], config.workers)

    _emit(rows + joint_rows, out_dir, 'tstar_sweep', artifacts)
    if out_dir is not None:
        frame = reporting.rows_frame(rows)
        for model, group in frame.groupby('model', sort=True):
            path = Path(out_dir) / 'plots' / f"tstar_sweep_{model}.svg"
            reporting.plot_curves(group, 't_star', path, f"{model}: accuracy vs t*", series_field='attack')
            _record(artifacts, path)
        if joint_rows:
            joint = reporting.rows_frame(joint_rows)
            for model, group in joint.groupby('model', sort=True):
                path = Path(out_dir) / 'plots' / f"joint_sweep_{model}.svg"
                reporting.plot_heatmap(group, path, f"{model}: accuracy over (epsilon, t*)")
                _record(artifacts, path)
    return rows + joint_rows


def run_adaptive_eval(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> list:
    """Clean and adaptive-l_inf accuracy through the full differentiable pipeline.

    Also reports undefended PGD accuracy and the same PGD examples transferred to
    the pipeline, so the adaptive rows can be compared with both.
    """
    ctx = _context(config, context)
    name, spec = ctx.linf_attack()
    t_star = ctx.t_star()
    adaptive_name = f"adaptive_{name}"
    shard = HarnessConfig.ADAPTIVE_BATCH_SIZE
    rows = []

    for model in sorted(ctx.classifiers):
        common = _common(ctx, 'adaptive', model)
        crafted, _ = ctx.craft(model, name, spec)
        rows.append(_accuracy_row(accuracy(ctx.classifiers[model], crafted), len(crafted), attack=name,
                                  epsilon=spec.epsilon, defense=False, **common))
        rows.append(_accuracy_row(accuracy(ctx.pipeline(model, t_star), crafted), len(crafted),
                                  attack=f"{name}_transfer", epsilon=spec.epsilon, defense=True,
                                  t_star=t_star, **common))

        def cell(index):
            start = index * shard
            x = ctx.eval_data.samples[start:start + shard]
            y = ctx.eval_data.labels[start:start + shard]
            seed = derive_seed(config.seed, 'adaptive', model, index)
            pipeline = ctx.pipeline(model, t_star, differentiable=True, seed=seed, batch_size=shard)
            result = adaptive_pgd(pipeline, x, y, spec, derive_seed(seed, 'attack'))
            return [(int((result.clean_predictions == y).sum()), int((result.adversarial_predictions == y).sum()))]

        shards = range(math.ceil(len(ctx.eval_data) / shard))
        counts = run_cells(cell, shards, config.workers)
        n = len(ctx.eval_data)
        rows.append(_accuracy_row(sum(c for c, _ in counts) / n, n, attack='clean', defense=True,
                                  t_star=t_star, **common))
        rows.append(_accuracy_row(sum(a for _, a in counts) / n, n, attack=adaptive_name, epsilon=spec.epsilon,
                                  defense=True, t_star=t_star, **common))

    _emit(rows, out_dir, 'adaptive', artifacts)
    return rows


def ood_cell(ctx, model: str, family, severity: int) -> list:
    """Two accuracy rows (without / with purification) for one corruption cell. Severity 0 is clean data."""
    spec = CorruptionSpec(family, severity)
    data = corrupt(ctx.eval_data, spec, derive_seed(ctx.config.seed, 'ood', spec.family.value, severity))
    t_star = ctx.t_star()
    common = dict(_common(ctx, 'ood', model), corruption=spec.family.value, severity=severity)
    return [
        _accuracy_row(accuracy(ctx.classifiers[model], data), len(data), defense=False, **common),
        _accuracy_row(accuracy(ctx.pipeline(model, t_star), data), len(data), defense=True,
                      t_star=t_star, **common),
    ]


def run_ood_eval(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> list:
    """Accuracy per (family, severity 1..5), with and without purification, plus mean_accuracy aggregates."""
    ctx = _context(config, context)
    if not ctx.eval_data.is_image:
        raise UnsupportedShapeError(ctx.eval_data.samples.shape, "image data for corruption benchmarks")
    families = sorted(CorruptionFamily, key=lambda f: f.value)
    cells = [(m, f, s) for m in sorted(ctx.classifiers) for f in families
             for s in range(1, DataConfig.MAX_SEVERITY + 1)]
    rows = run_cells(lambda c: ood_cell(ctx, *c), cells, config.workers)

    aggregates = []
    for model in sorted(ctx.classifiers):
        for defense in (False, True):
            values = np.array([r.value for r in rows if r.model == model and r.defense == defense])
            aggregates.append(ResultRow(
                metric='mean_accuracy', value=float(values.mean()), n=int(values.size),
                stderr=float(values.std() / math.sqrt(values.size)), defense=defense,
                t_star=ctx.t_star() if defense else 0, corruption='all', **_common(ctx, 'ood', model)))

    _emit(rows + aggregates, out_dir, 'ood', artifacts)
    return rows + aggregates


@dataclass(frozen=True)
class QualityResult:
    reports: dict
    rows: list
    grids: tuple = ()


def run_quality_eval(config, context=None, out_dir=None, artifacts: Optional[list] = None) -> QualityResult:
    """SSIM / PSNR of purified clean and purified adversarial samples, plus 5-row image grids.

    Grid rows: clean, adversarial, purified adversarial, adversarial perturbation
    and residual perturbation (purified - clean), both amplified by
    MetricConfig.PERTURBATION_AMPLIFICATION around a mid-gray offset.
    """
    ctx = _context(config, context)
    if not ctx.eval_data.is_image:
        raise UnsupportedShapeError(ctx.eval_data.samples.shape, "image data for quality metrics")
    name, spec = ctx.linf_attack()
    t_star = ctx.t_star()
    reports, rows, grids = {}, [], []

    for model in sorted(ctx.classifiers):
        clean = ctx.eval_data.samples
        adversarial, _ = ctx.craft(model, name, spec)
        pipeline = ctx.pipeline(model, t_star)
        purified_adv = pipeline.purify(adversarial.samples)
        purified_clean = pipeline.purify(clean)

        model_reports = {
            'ssim_purified_clean_vs_clean': MetricReport.from_values(
                'ssim_purified_clean_vs_clean', ssim_batch(purified_clean, clean)),
            'psnr_purified_clean_vs_clean': MetricReport.from_values(
                'psnr_purified_clean_vs_clean', psnr_batch(purified_clean, clean)),
            'ssim_purified_adv_vs_clean': MetricReport.from_values(
                'ssim_purified_adv_vs_clean', ssim_batch(purified_adv, clean)),
            'psnr_purified_adv_vs_clean': MetricReport.from_values(
                'psnr_purified_adv_vs_clean', psnr_batch(purified_adv, clean)),
            'ssim_purified_adv_vs_adv': MetricReport.from_values(
                'ssim_purified_adv_vs_adv', ssim_batch(purified_adv, adversarial.samples)),
            'psnr_purified_adv_vs_adv': MetricReport.from_values(
                'psnr_purified_adv_vs_adv', psnr_batch(purified_adv, adversarial.samples)),
        }
        features = feature_distance(ctx.classifiers[model], purified_adv, clean)
        model_reports[features.name] = features

        for metric, report in sorted(model_reports.items()):
            reports[(model, metric)] = report
            rows.append(ResultRow(metric=metric, value=report.mean, n=int(report.values.size),
                                  stderr=report.stderr, attack=name, epsilon=spec.epsilon, defense=True,
                                  t_star=t_star, **_common(ctx, 'quality', model)))

        if out_dir is not None:
            k = HarnessConfig.GRID_COLUMNS
            panels = reporting.grid_panels(clean[:k], adversarial.samples[:k], purified_adv[:k],
                                           MetricConfig.PERTURBATION_AMPLIFICATION, MetricConfig.PANEL_OFFSET)
            grids.append(reporting.render_grid(
                panels, Path(out_dir) / 'grids' / f"quality_{model}.{HarnessConfig.GRID_FORMAT}"))

    _emit(rows, out_dir, 'quality', artifacts)
    _record(artifacts, *grids)
    return QualityResult(reports, rows, tuple(grids))


# ============================================================================
# ACCEPTANCE
# ============================================================================

def monotone_nonincreasing(values, violations: int = HarnessConfig.MONOTONE_VIOLATIONS,
                           slack: float = HarnessConfig.MONOTONE_SLACK) -> bool:
    """At most `violations` increases, each no larger than `slack`."""
    steps = np.diff(np.asarray(values, dtype=np.float64))
    increases = steps[steps > 0]
    return increases.size <= violations and bool((increases <= slack).all())


def has_interior_maximum(values) -> bool:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 3:
        return False
    best = values.max()
    return values[0] < best and values[-1] < best


def _value(frame, **match) -> Optional[float]:
    subset = frame
    for key, value in match.items():
        subset = subset[subset[key] == value]
    return float(subset['value'].iloc[0]) if len(subset) else None


def check_acceptance(rows) -> list:
    """Names of failed directional checks among the experiments present in rows."""
    frame = reporting.rows_frame(rows)
    failed = []
    if frame.empty:
        return failed
    acc = frame[frame['metric'] == 'accuracy']

    defense = acc[acc['experiment'] == 'defense']
    for model, group in defense.groupby('model', sort=True):
        clean_off = _value(group, attack='clean', defense=False)
        clean_on = _value(group, attack='clean', defense=True)
        if clean_off - clean_on > HarnessConfig.MAX_CLEAN_DROP:
            failed.append(f"defense/{model}/clean_drop")
        for attack in sorted(a for a in group['attack'].unique() if 'linf' in a):
            gain = _value(group, attack=attack, defense=True) - _value(group, attack=attack, defense=False)
            if gain < HarnessConfig.MIN_DEFENSE_GAIN:
                failed.append(f"defense/{model}/{attack}/gain")

    sweep = acc[(acc['experiment'] == 'eps_sweep') & (acc['attack'] == 'pgd_linf')]
    for model, group in sweep.groupby('model', sort=True):
        on = group[group['defense']].sort_values('epsilon')
        off = group[~group['defense']].sort_values('epsilon')
        gaps = on['value'].to_numpy() - off['value'].to_numpy()
        eps = on['epsilon'].to_numpy()
        nonzero = np.flatnonzero(eps > 0)
        if nonzero.size and gaps[nonzero[0]] < HarnessConfig.MIN_SWEEP_GAIN:
            failed.append(f"eps_sweep/{model}/gain")
        if nonzero.size > 1 and not gaps[-1] < gaps[nonzero[0]]:
            failed.append(f"eps_sweep/{model}/gap_shrinks")
        if not monotone_nonincreasing(on['value']):
            failed.append(f"eps_sweep/{model}/monotone")

    tstar = acc[acc['experiment'] == 'tstar_sweep']
    for model, group in tstar.groupby('model', sort=True):
        clean = group[group['attack'] == 'clean'].sort_values('t_star')['value']
        adversarial = group[group['attack'] != 'clean'].sort_values('t_star')['value']
        if not monotone_nonincreasing(clean):
            failed.append(f"tstar_sweep/{model}/clean_monotone")
        if not has_interior_maximum(adversarial):
            failed.append(f"tstar_sweep/{model}/interior_maximum")

    adaptive = acc[acc['experiment'] == 'adaptive']
    for model, group in adaptive.groupby('model', sort=True):
        undefended = group[(~group['defense']) & (group['attack'] != 'clean')]
        attacked = group[group['attack'].str.startswith('adaptive_')]
        if len(undefended) and len(attacked):
            if attacked['value'].iloc[0] - undefended['value'].iloc[0] < HarnessConfig.MIN_ADAPTIVE_GAIN:
                failed.append(f"adaptive/{model}/gain")

    ood = frame[(frame['experiment'] == 'ood') & (frame['metric'] == 'mean_accuracy')]
    for model, group in ood.groupby('model', sort=True):
        gain = _value(group, defense=True) - _value(group, defense=False)
        if gain < HarnessConfig.MIN_OOD_GAIN:
            failed.append(f"ood/{model}/gain")

    quality = frame[(frame['experiment'] == 'quality') & (frame['metric'] == 'ssim_purified_clean_vs_clean')]
    for _, row in quality.iterrows():
        if row['value'] < HarnessConfig.MIN_QUALITY_SSIM:
            failed.append(f"quality/{row['model']}/ssim")

    for name in failed:
        logger.warning(f"Acceptance check failed: {name}")
    return failed


__all__ = [
    'ResultRow',
    'run_cells',
    'model_name',
    'ExperimentContext',
    'generate_data',
    'train_classifiers',
    'train_diffusion_model',
    'run_attacks',
    'run_purify',
    'run_certification',
    'run_defense_eval',
    'run_epsilon_sweep',
    'run_tstar_sweep',
    'run_adaptive_eval',
    'ood_cell',
    'run_ood_eval',
    'QualityResult',
    'run_quality_eval',
    'monotone_nonincreasing',
    'has_interior_maximum',
    'check_acceptance',
]
