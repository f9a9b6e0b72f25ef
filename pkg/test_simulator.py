#!/usr/bin/env python3
"""
Simulator scenarios: honest spread, Byzantine behaviours, catch-up,
determinism and scenario files
"""

from dataclasses import replace

from documents import DocumentId
from errors import ConfigError
from scenarios import (acceptance_rate_at_most, all_correct_blacklisted, assert_scenario, builtin,
                       catch_up, coverage_at_least, detection_within, equivocator, fetch_returned_version,
                       flooder, honest_spread, no_correct_peer_blacklisted, no_violations, parse_scenario,
                       rounds_at_most, run_scenario, silent_droppers, stale_server, stripper)
from simulator import SimConfig, Simulation, WorkloadEvent, run

SEEDS = range(20)


def _assert_passed(result):
    assert result.passed, result.render()


def test_honest_spread_over_twenty_seeds():
    for seed in SEEDS:
        config = honest_spread(seed)
        result = assert_scenario(config, [coverage_at_least(1.0), rounds_at_most(50), no_violations()])
        _assert_passed(result)
        failures = sum(stats.get('verify_failures', 0) for stats in result.metrics.peer_stats.values())
        assert failures == 0, f"seed {seed}: {failures} verification failures"


def test_silent_droppers_cannot_block_updates():
    for seed in SEEDS:
        config = silent_droppers(seed)
        correct = [n for n in config.peer_names() if n not in config.adversaries]
        result = assert_scenario(config, [coverage_at_least(1.0), no_violations(),
                                          no_correct_peer_blacklisted(correct)])
        _assert_passed(result)


def test_equivocator_is_cut_off():
    for seed in range(3):
        config = equivocator(seed)
        simulation = Simulation(config)
        metrics = simulation.run()
        correct = [p.name for p in simulation.correct_peers()]
        for predicate in (detection_within(10), all_correct_blacklisted('P1', correct), no_violations()):
            reason = predicate(metrics)
            assert reason is None, f"seed {seed}: {reason}"
        for doc_id, activated in simulation.activations.items():
            assert doc_id.path != '/docs/split' or not set(activated) & set(correct), \
                f"seed {seed}: {doc_id} activated at {sorted(activated)}"


def test_redundant_reads_beat_stale_servers():
    metrics = run(stale_server(seed=3))
    assert len(metrics.fetch_results) == 100
    assert fetch_returned_version(2)(metrics) is None


def test_flood_is_rate_limited():
    config = flooder(seed=5)
    result = assert_scenario(config, [
        acceptance_rate_at_most('P8', config.rate_capacity, window=1.0),
        acceptance_rate_at_most('P8', config.rate_capacity + int(config.rate_refill_per_min), window=60.0),
        coverage_at_least(1.0, '/docs'),
        no_violations(),
    ])
    _assert_passed(result)
    assert any(stats.get('deferred', 0) for stats in result.metrics.peer_stats.values())


def test_stripping_only_slows_propagation():
    for seed in range(3):
        stripped = run(stripper(seed))
        baseline = run(replace(stripper(seed), adversaries={}))
        assert coverage_at_least(1.0)(stripped) is None
        slowest = max(stripped.rounds_to_active.values())
        honest = max(baseline.rounds_to_active.values())
        assert slowest <= 2 * max(honest, 1), f"seed {seed}: {slowest} rounds against {honest}"


def test_offline_peer_catches_up():
    config = catch_up(seed=11)
    simulation = Simulation(config)
    metrics = simulation.run()
    assert coverage_at_least(1.0, '/backlog')(metrics) is None
    (result,) = [r for r in metrics.reconcile_results if r['peer'] == 'P8']
    assert result['error'] is None and result['fetched'] == 50

    p8 = simulation.peers['P8'].peer_id
    for i in range(50):
        doc_id = DocumentId(f"/backlog/d{i}", 1)
        holders = [p for p in simulation.peers.values()
                   if (stored := p.engine.store.lookup(doc_id)) is not None and p8 in stored.block]
        assert len(holders) >= 5, f"{doc_id}: P8's signature reached {len(holders)} peers"


def test_runs_are_reproducible():
    first = run(honest_spread(seed=4))
    second = run(honest_spread(seed=4))
    other = run(honest_spread(seed=5))
    assert first.trace_digest == second.trace_digest
    assert first.to_jsonl() == second.to_jsonl()
    assert first.trace_digest != other.trace_digest


def test_expected_fail_when_adversaries_reach_quorum():
    config = SimConfig(n_peers=4, adversaries={'P1': 'silentdrop', 'P2': 'silentdrop', 'P3': 'silentdrop'})
    assert Simulation(config).metrics.expected_fail
    assert not Simulation(SimConfig(n_peers=4, adversaries={'P1': 'flood'})).metrics.expected_fail


def test_config_validation():
    for bad in (SimConfig(n_peers=0), SimConfig(delivery_prob=1.5), SimConfig(latency=(3, 1)),
                SimConfig(adversaries={'P99': 'flood'}),
                SimConfig(workload=[WorkloadEvent(0, 'inject', 'P9', ('/a', '8'))])):
        try:
            Simulation(bad)
            assert False, f"accepted {bad}"
        except ConfigError:
            pass
    try:
        Simulation(SimConfig(adversaries={'P1': 'sneaky'}))
        assert False
    except ConfigError:
        pass


SCENARIO = """
# small honest group
n_peers = 6
delivery_prob = 0.95
latency = 1-2
policy = path /** { authors: any; active: quorum(4, {all}); }   # four of six
at 0 inject P1 /notes/a 32
at 5 inject P2 /notes/b 32
at 300 fetch P6 /notes/a @ 1
expect coverage >= 1.0
expect rounds_to_active <= 20
expect no_violations
expect fetch_version 1 P6
"""


def test_scenario_file_round():
    scenario = parse_scenario(SCENARIO)
    config = scenario.config
    assert config.n_peers == 6 and config.latency == (1, 2)
    assert '{all}' in config.policy and config.policy.endswith('# four of six')
    assert [e.kind for e in config.workload] == ['inject', 'inject', 'fetch']
    assert len(scenario.predicates) == 4
    results = run_scenario(scenario, seeds=[1, 2])
    assert len(results) == 2
    for result in results:
        _assert_passed(result)


def test_scenario_parse_errors():
    for text in ('n_peers = many', 'colour = blue', 'at x inject P1 /a 8', 'at 0 inject P1 /a',
                 'expect coverage = 1.0', 'expect happiness', 'adversary P1', 'frobnicate'):
        try:
            parse_scenario(text)
            assert False, f"parsed {text!r}"
        except ConfigError:
            pass
    try:
        builtin('nonesuch')
        assert False
    except ConfigError:
        pass


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
