#!/usr/bin/env python3
"""
Test metrics frames and chart output for simulator runs
"""

import json
import os
import tempfile

from charts import create_coverage_chart, create_messages_chart, create_sweep_chart
from metrics_processor import SimulationMetricsProcessor
from simulator import SimConfig, WorkloadEvent, run


def small_run(seed=0):
    workload = [WorkloadEvent(0, 'inject', 'P1', ('/m/a', '16')), WorkloadEvent(3, 'inject', 'P2', ('/m/b', '16'))]
    return run(SimConfig(n_peers=5, seed=seed, workload=workload, max_rounds=30, label='metrics'))


def test_frames():
    processor = SimulationMetricsProcessor()
    metrics = small_run()
    docs = processor.documents_frame(metrics)
    assert list(docs['document']) == ['/m/a@1', '/m/b@1']
    assert list(docs['version']) == [1, 1]
    assert docs['fully_active'].all()

    messages = processor.messages_frame(metrics)
    assert set(messages['type']) >= {'IHAVE', 'GET', 'GETANSWER'}
    assert abs(messages['share'].sum() - 1.0) < 1e-9

    peers = processor.peers_frame(metrics)
    assert len(peers) == 5 and (peers['verify_failures'] == 0).all()
    assert not processor.coverage_timeline(metrics).empty


def test_summary_stats():
    processor = SimulationMetricsProcessor()
    stats = processor.get_summary_stats(small_run())
    assert stats['documents'] == 2
    assert stats['mean_coverage'] == 1.0
    assert stats['fully_active'] == 2
    assert stats['violations'] == 0
    assert stats['messages_per_document'] > 0


def test_sweep_and_records():
    processor = SimulationMetricsProcessor()
    runs = {seed: small_run(seed) for seed in range(3)}
    sweep = processor.compare_runs(runs)
    assert list(sweep.index) == [0, 1, 2]
    summary = processor.sweep_stats(runs)
    assert summary['seeds'] == 3 and summary['runs_with_violations'] == 0

    records = [json.loads(line) for line in runs[0].to_jsonl().splitlines()]
    df = processor.records_frame(records)
    assert (df['record'] == 'run').sum() == 1
    assert (df['record'] == 'document').sum() == 2
    assert 'document' in processor.format_table(processor.documents_frame(runs[0]))


def test_charts_are_written():
    processor = SimulationMetricsProcessor()
    runs = {seed: small_run(seed) for seed in range(2)}
    with tempfile.TemporaryDirectory() as tmp:
        paths = [
            create_coverage_chart({f"seed {s}": m for s, m in runs.items()}, os.path.join(tmp, 'coverage.png')),
            create_messages_chart(runs[0], os.path.join(tmp, 'messages.png')),
            create_sweep_chart(processor.compare_runs(runs), os.path.join(tmp, 'sweep.png')),
        ]
        for path in paths:
            assert os.path.getsize(path) > 0


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith('test_') and callable(v)]
    passed = 0
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"❌ {test.__name__}: {e!r}")
    print(f"📊 {passed}/{len(tests)} tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    exit(0 if main() else 1)
