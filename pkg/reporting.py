"""
reporting.py

Result persistence and rendering: JSON-lines rows, CSV, plain-text tables
laid out like the defense / adaptive / corruption tables, SVG plots, PNG
image grids and the per-run manifest.

All outputs are byte-deterministic for identical inputs: rows are sorted,
floats are written with full precision, SVG ids are salted with a constant
and no timestamps are embedded.
"""
import logging
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

import serialization  # noqa: E402
from config import HarnessConfig, MetricConfig  # noqa: E402
from exceptions import ArgumentError, ConfigurationError  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams['svg.hashsalt'] = 'purification-report'

ROW_FIELDS = ('experiment', 'dataset', 'model', 'attack', 'defense', 'epsilon', 't_star',
              'corruption', 'severity', 'metric', 'value', 'n', 'stderr')

# baseline properties shown next to the defense table
STATIC_ANNOTATIONS = {
    'extra_data': 'no',
    'extra_model': 'diffusion model (trained on clean data only)',
}


# ============================================================================
# ROWS
# ============================================================================

def rows_frame(rows) -> pd.DataFrame:
    """Rows as a DataFrame in the canonical column and row order."""
    records = [r.to_record() if hasattr(r, 'to_record') else dict(r) for r in rows]
    frame = pd.DataFrame.from_records(records, columns=list(ROW_FIELDS))
    if frame.empty:
        return frame
    keys = [f for f in ROW_FIELDS if f not in ('value', 'n', 'stderr')]
    return frame.sort_values(keys, kind='mergesort').reset_index(drop=True)


def write_rows(rows, stem) -> dict:
    """`<stem>.jsonl` and `<stem>.csv` with identical, sorted content."""
    frame = rows_frame(rows)
    jsonl = serialization.write_jsonl(f"{stem}.jsonl", frame.to_dict(orient='records'))
    csv_path = Path(f"{stem}.csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False, float_format='%.12g', lineterminator='\n')
    return {'rows': str(jsonl), 'csv': str(csv_path)}


def read_rows(paths) -> list:
    records = []
    for path in paths:
        if not Path(path).exists():
            raise ConfigurationError("Missing results file", path=path)
        records.extend(serialization.read_jsonl(path))
    return records


# ============================================================================
# TABLES
# ============================================================================

def _cell(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return HarnessConfig.MISSING_CELL
    return f"{100 * value:.1f}"


def _layout(experiment: str):
    """Row keys and column key of the text table for one experiment."""
    if experiment == 'ood':
        return ['model', 'corruption', 'severity'], 'defense'
    if experiment == 'eps_sweep':
        return ['model', 'attack', 'epsilon'], 'defense'
    if experiment in ('tstar_sweep', 'joint_sweep'):
        return ['model', 'attack', 'epsilon'], 't_star'
    return ['model', 'attack'], 'defense'


def format_table(frame: pd.DataFrame, experiment: str) -> str:
    """Accuracy table (percent) with '-' for missing cells and a recomputed mean row."""
    subset = frame[(frame['experiment'] == experiment) & (frame['metric'] == 'accuracy')]
    if subset.empty:
        return ''
    index, column = _layout(experiment)
    table = subset.pivot_table(index=index, columns=column, values='value', aggfunc='first', dropna=False)
    table = table.sort_index().sort_index(axis=1)
    means = table.mean(axis=0, skipna=True)

    labels = [' / '.join(str(v) for v in (key if isinstance(key, tuple) else (key,))) for key in table.index]
    headers = [_column_name(column, c) for c in table.columns]
    width = max([len(l) for l in labels] + [len('mean')]) + 2
    lines = [f"== {experiment} ==", ' ' * width + ''.join(f"{h:>12}" for h in headers)]
    for label, (_, values) in zip(labels, table.iterrows()):
        lines.append(f"{label:<{width}}" + ''.join(f"{_cell(v):>12}" for v in values))
    lines.append(f"{'mean':<{width}}" + ''.join(f"{_cell(v):>12}" for v in means))
    return '\n'.join(lines) + '\n'


def _column_name(column: str, value) -> str:
    if column == 'defense':
        return 'defended' if bool(value) else 'undefended'
    return f"{column}={value}"


def table_means(frame: pd.DataFrame, experiment: str) -> pd.Series:
    """Column means of the accuracy table, as printed in its 'mean' row."""
    subset = frame[(frame['experiment'] == experiment) & (frame['metric'] == 'accuracy')]
    index, column = _layout(experiment)
    table = subset.pivot_table(index=index, columns=column, values='value', aggfunc='first', dropna=False)
    return table.mean(axis=0, skipna=True)


def report(rows, out_dir) -> dict:
    """Write results.jsonl, results.csv and tables.txt under out_dir. Same rows in, same bytes out."""
    out_dir = Path(out_dir)
    frame = rows_frame(rows)
    if frame.empty:
        raise ArgumentError("No result rows to report")
    paths = write_rows(rows, out_dir / 'results')

    sections = []
    for experiment in sorted(frame['experiment'].unique()):
        text = format_table(frame, experiment)
        if text:
            sections.append(text)
        if experiment == 'defense':
            sections.append(''.join(f"  {k}: {v}\n" for k, v in sorted(STATIC_ANNOTATIONS.items())))
    other = frame[frame['metric'] != 'accuracy']
    if not other.empty:
        lines = ['== other metrics ==']
        for _, row in other.iterrows():
            lines.append(f"{row['experiment']} {row['model']} {row['attack']} {row['metric']}: "
                         f"{row['value']:.6g} (n={row['n']}, se={row['stderr']:.3g})")
        sections.append('\n'.join(lines) + '\n')

    tables = out_dir / 'tables.txt'
    with open(tables, 'w') as f:
        f.write('\n'.join(sections))
    paths['tables'] = str(tables)
    logger.info(f"Report written to {out_dir}")
    return paths


# ============================================================================
# PLOTS
# ============================================================================

def _save_figure(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format=HarnessConfig.PLOT_FORMAT, metadata={'Date': None})
    plt.close(fig)
    return str(path)


def plot_curves(frame: pd.DataFrame, x_field: str, path, title: str, series_field: str = 'defense') -> str:
    """Accuracy vs x_field, one line per value of series_field."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, group in frame.groupby(series_field, sort=True):
        group = group.sort_values(x_field)
        label = _column_name(series_field, key) if series_field == 'defense' else str(key)
        ax.plot(group[x_field], 100 * group['value'], marker='o', label=label)
    ax.set_xlabel(x_field)
    ax.set_ylabel('accuracy (%)')
    ax.set_title(title)
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    return _save_figure(fig, path)


def plot_heatmap(frame: pd.DataFrame, path, title: str) -> str:
    """Accuracy over the joint (epsilon, t*) grid."""
    table = frame.pivot_table(index='epsilon', columns='t_star', values='value', aggfunc='first')
    table = table.sort_index().sort_index(axis=1)
    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(100 * table.values, origin='lower', aspect='auto', vmin=0, vmax=100, cmap='viridis')
    ax.set_xticks(range(len(table.columns)))
    ax.set_xticklabels([str(c) for c in table.columns])
    ax.set_yticks(range(len(table.index)))
    ax.set_yticklabels([f"{e * 255:.0f}/255" for e in table.index])
    ax.set_xlabel('t*')
    ax.set_ylabel('epsilon')
    ax.set_title(title)
    fig.colorbar(image, ax=ax, label='accuracy (%)')
    fig.tight_layout()
    return _save_figure(fig, path)


# ============================================================================
# IMAGE GRIDS
# ============================================================================

def perturbation_panel(delta: torch.Tensor, amplification: float = MetricConfig.PERTURBATION_AMPLIFICATION,
                       offset: float = MetricConfig.PANEL_OFFSET) -> torch.Tensor:
    """clip(offset + k * delta, 0, 1): zero perturbation renders mid-gray."""
    return (offset + amplification * delta).clamp(0.0, 1.0)


def grid_panels(clean, adversarial, purified, amplification: float = MetricConfig.PERTURBATION_AMPLIFICATION,
                offset: float = MetricConfig.PANEL_OFFSET) -> list:
    """Five rows: clean, adversarial, purified, adversarial perturbation, residual perturbation."""
    return [
        clean,
        adversarial,
        purified,
        perturbation_panel(adversarial - clean, amplification, offset),
        perturbation_panel(purified - clean, amplification, offset),
    ]


def render_grid(rows, path, columns: int = HarnessConfig.GRID_COLUMNS, padding: int = 1) -> str:
    """Tile (N, 1, H, W) batches row by row into a lossless grayscale PNG."""
    if not rows:
        raise ArgumentError("Nothing to render")
    height, width = rows[0].shape[-2:]
    columns = min(columns, rows[0].shape[0])
    canvas = np.ones(((height + padding) * len(rows) + padding, (width + padding) * columns + padding))
    for r, batch in enumerate(rows):
        if batch.ndim != 4 or batch.shape[1] != 1:
            raise ArgumentError(f"Grid rows must be (N, 1, H, W) images, got {tuple(batch.shape)}")
        for c in range(columns):
            top = padding + r * (height + padding)
            left = padding + c * (width + padding)
            canvas[top:top + height, left:left + width] = batch[c, 0].detach().to(torch.float64).numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format=HarnessConfig.GRID_FORMAT.upper())
    return str(path)


# ============================================================================
# MANIFEST
# ============================================================================

def write_manifest(out_dir, command: str, config_hash: str, checkpoint_hashes: dict, artifacts) -> str:
    """Per-run manifest of inputs (config and checkpoint hashes) and outputs."""
    manifest = {
        'command': command,
        'config_sha256': config_hash,
        'checkpoints': dict(sorted(checkpoint_hashes.items())),
        'artifacts': sorted(str(a) for a in artifacts),
        'formats': {'grid': HarnessConfig.GRID_FORMAT, 'plot': HarnessConfig.PLOT_FORMAT,
                    'rows': 'jsonl', 'tables': 'csv+txt'},
    }
    path = serialization.write_json(Path(out_dir) / 'manifests' / f"{command}.json", manifest)
    return str(path)


__all__ = [
    'ROW_FIELDS',
    'STATIC_ANNOTATIONS',
    'rows_frame',
    'write_rows',
    'read_rows',
    'format_table',
    'table_means',
    'report',
    'plot_curves',
    'plot_heatmap',
    'perturbation_panel',
    'grid_panels',
    'render_grid',
    'write_manifest',
]
