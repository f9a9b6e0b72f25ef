import logging
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from simulator import Metrics

logger = logging.getLogger(__name__)


class SimulationMetricsProcessor:
    """Turns simulator Metrics into DataFrames and summary tables"""

    def documents_frame(self, metrics: Metrics) -> pd.DataFrame:
        """One row per injected document"""
        rows = []
        for doc, coverage in sorted(metrics.coverage.items()):
            path, _, version = doc.rpartition('@')
            rows.append({
                'document': doc,
                'path': path,
                'version': int(version) if version.isdigit() else None,
                'coverage': coverage,
                'rounds_to_active': metrics.rounds_to_active.get(doc),
            })
        df = pd.DataFrame(rows, columns=['document', 'path', 'version', 'coverage', 'rounds_to_active'])
        if not df.empty:
            df['rounds_to_active'] = pd.to_numeric(df['rounds_to_active'], errors='coerce')
            df['fully_active'] = df['rounds_to_active'].notna()
        return df

    def messages_frame(self, metrics: Metrics) -> pd.DataFrame:
        df = pd.DataFrame(sorted(metrics.messages_by_type.items()), columns=['type', 'count'])
        if not df.empty and df['count'].sum() > 0:
            df['share'] = df['count'] / df['count'].sum()
        return df

    def peers_frame(self, metrics: Metrics) -> pd.DataFrame:
        """Bytes sent, blacklist size and engine counters per peer"""
        rows = []
        for peer in sorted(metrics.bytes_per_peer):
            stats = metrics.peer_stats.get(peer, {})
            rows.append({
                'peer': peer,
                'bytes_sent': metrics.bytes_per_peer[peer],
                'blacklisted': len(metrics.blacklists.get(peer, [])),
                'accepted': sum(len(times) for times in metrics.acceptances.get(peer, {}).values()),
                'duplicates': stats.get('duplicates', 0),
                'deferred': stats.get('deferred', 0),
                'signatures_created': stats.get('signatures_created', 0),
                'verify_failures': stats.get('verify_failures', 0),
            })
        return pd.DataFrame(rows)

    def coverage_timeline(self, metrics: Metrics) -> pd.DataFrame:
        return pd.DataFrame(metrics.coverage_timeline, columns=['round', 'coverage'])

    def get_summary_stats(self, metrics: Metrics) -> dict:
        """Headline numbers for one run"""
        docs = self.documents_frame(metrics)
        if docs.empty:
            return {'documents': 0, 'rounds': metrics.rounds, 'messages': metrics.total_messages}

        done = docs['rounds_to_active'].dropna()
        return {
            'documents': len(docs),
            'rounds': metrics.rounds,
            'messages': metrics.total_messages,
            'messages_per_document': metrics.total_messages / len(docs),
            'mean_coverage': float(docs['coverage'].mean()),
            'min_coverage': float(docs['coverage'].min()),
            'fully_active': int(docs['fully_active'].sum()),
            'rounds_to_active_mean': float(done.mean()) if not done.empty else None,
            'rounds_to_active_p95': float(np.percentile(done, 95)) if not done.empty else None,
            'duplicate_offers': metrics.duplicate_offers,
            'detection_latency': metrics.detection_latency,
            'violations': len(metrics.violations),
        }

    def compare_runs(self, runs: Dict[int, Metrics]) -> pd.DataFrame:
        """Summary row per seed, for multi-seed sweeps"""
        rows = []
        for seed, metrics in sorted(runs.items()):
            stats = self.get_summary_stats(metrics)
            stats['seed'] = seed
            rows.append(stats)
        return pd.DataFrame(rows).set_index('seed') if rows else pd.DataFrame()

    def sweep_stats(self, runs: Dict[int, Metrics]) -> dict:
        df = self.compare_runs(runs)
        if df.empty:
            return {}
        stats = {
            'seeds': len(df),
            'mean_coverage': float(df['mean_coverage'].mean()),
            'worst_coverage': float(df['min_coverage'].min()),
            'mean_messages': float(df['messages'].mean()),
            'runs_with_violations': int((df['violations'] > 0).sum()),
        }
        if 'rounds_to_active_mean' in df.columns:
            stats['rounds_to_active_mean'] = float(df['rounds_to_active_mean'].dropna().mean())
        return stats

    def records_frame(self, records: Sequence[dict]) -> pd.DataFrame:
        """Load line-delimited records (as written by Metrics.to_jsonl) back into one frame"""
        df = pd.DataFrame(list(records))
        if df.empty:
            logger.warning("No metrics records to load")
        return df

    def format_table(self, df: pd.DataFrame, columns: List[str] = None) -> str:
        if df.empty:
            return '(no rows)'
        view = df[columns] if columns else df
        return view.to_string(index=False, float_format=lambda v: f"{v:.3f}")
