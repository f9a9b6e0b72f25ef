import logging
from typing import Dict, Optional

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from metrics_processor import SimulationMetricsProcessor  # noqa: E402
from simulator import Metrics  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams.update({
    'axes.grid': True,
    'grid.alpha': 0.3,
    'axes.spines.top': False,
    'axes.spines.right': False,
    'figure.dpi': 100,
})


def create_coverage_chart(runs: Dict[str, Metrics], path: str, title: Optional[str] = None) -> str:
    """Mean active coverage per round, one line per labelled run"""
    processor = SimulationMetricsProcessor()
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label, metrics in runs.items():
        timeline = processor.coverage_timeline(metrics)
        if timeline.empty:
            continue
        ax.plot(timeline['round'], timeline['coverage'], marker='o', markersize=3, label=label)
    ax.set_xlabel('round')
    ax.set_ylabel('fraction of correct peers with document active')
    ax.set_ylim(0, 1.05)
    ax.set_title(title or 'Activation coverage over rounds')
    if runs:
        ax.legend(loc='lower right')
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Wrote coverage chart to {path}")
    return path


def create_messages_chart(metrics: Metrics, path: str, title: Optional[str] = None) -> str:
    """Bar chart of messages sent by type"""
    df = SimulationMetricsProcessor().messages_frame(metrics)
    fig, ax = plt.subplots(figsize=(6, 4))
    if not df.empty:
        ax.bar(df['type'], df['count'], color='#4c72b0')
        for x, count in zip(df['type'], df['count']):
            ax.annotate(str(count), (x, count), ha='center', va='bottom', fontsize=8)
    ax.set_ylabel('messages')
    ax.set_title(title or 'Messages by type')
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Wrote message chart to {path}")
    return path


def create_sweep_chart(sweep: pd.DataFrame, path: str, column: str = 'rounds_to_active_mean') -> str:
    """Per-seed values of one summary column from SimulationMetricsProcessor.compare_runs"""
    fig, ax = plt.subplots(figsize=(7, 4))
    if not sweep.empty and column in sweep.columns:
        values = sweep[column].dropna()
        ax.scatter(values.index, values.values, color='#dd8452')
        if not values.empty:
            ax.axhline(values.mean(), linestyle='--', color='grey', label=f"mean {values.mean():.2f}")
            ax.legend()
    ax.set_xlabel('seed')
    ax.set_ylabel(column.replace('_', ' '))
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
