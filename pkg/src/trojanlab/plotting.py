"""
Static curve images for evaluation and attack outputs.
"""

import logging
from typing import Dict, List, Optional, Sequence

import matplotlib
matplotlib.use('AGG')
import matplotlib.pyplot as plt  # noqa: E402

from trojanlab.runio import ensure_parent  # noqa: E402

logger = logging.getLogger(__name__)


def plot_series(x: Sequence[float], series: Dict[str, Sequence[float]], path: str, title: str = '',
                xlabel: str = '', ylabel: str = '', ylim: Optional[Sequence[float]] = None) -> str:
    """Draw one line per named series against ``x`` and save a PNG."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for name, values in series.items():
        ax.plot(list(x), list(values), marker='o', markersize=3, label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if ylim is not None:
        ax.set_ylim(*ylim)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    ensure_parent(path)
    fig.savefig(path, dpi=120, bbox_inches='tight')
    plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def _by_seed(points: Dict[int, List[Dict]], x_key: str, y_key: str):
    xs = sorted({p[x_key] for rows in points.values() for p in rows})
    series = {}
    for seed, rows in points.items():
        lookup = {p[x_key]: p[y_key] for p in rows}
        series[f'seed {seed}'] = [lookup.get(x, float('nan')) for x in xs]
    return xs, series


def plot_persistence(curves: Dict[int, List[Dict]], path: str) -> str:
    xs, series = _by_seed(curves, 'k', 'cp')
    return plot_series(xs, series, path, title='Persistence', xlabel='k', ylabel='CP', ylim=(0.0, 1.05))


def plot_perturbation(curves: Dict[int, List[Dict]], path: str) -> str:
    xs, series = _by_seed(curves, 'level', 'asr')
    return plot_series(xs, series, path, title='Trigger noise', xlabel='noise level', ylabel='ASR',
                       ylim=(0.0, 1.05))


def plot_snapshots(rows: Sequence[Dict], path: str) -> str:
    steps = [int(r['model_step']) for r in rows]
    series = {name: [float(r[name]) for r in rows] for name in ('asr', 'btp') if rows and name in rows[0]}
    return plot_series(steps, series, path, title='Attack progress', xlabel='model step', ylabel='rate')


def plot_loss(history: Sequence[float], path: str) -> str:
    return plot_series(range(1, len(history) + 1), {'loss': history}, path, title='Training loss',
                       xlabel='step', ylabel='loss')
