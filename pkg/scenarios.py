"""
Scenario files and acceptance predicates for the simulator.

A scenario file is line oriented; '#' starts a comment:

    n_peers = 16
    seed = 7
    delivery_prob = 0.9
    latency = 1-3
    policy = path /** { authors: any; active: quorum(9, {all}); }
    adversary P3 silentdrop
    partition 0 200 P1,P2
    at 0 inject P1 /docs/a 256
    at 400 fetch P2 /docs/a @ 1
    at 400 reconcile P8 P1
    at 0 offline P8 300
    expect coverage >= 1.0
    expect rounds_to_active <= 15
"""

import logging
import operator
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

from errors import ConfigError
from simulator import Metrics, Partition, SimConfig, WorkloadEvent, run

logger = logging.getLogger(__name__)

Predicate = Callable[[Metrics], Optional[str]]

_INT_KEYS = ('n_peers', 'n_admins', 'seed', 'ticks_per_second', 'round_ticks', 'max_rounds', 'fanout',
             'initial_fanout', 'rate_capacity', 'request_timeout_rounds')
_FLOAT_KEYS = ('delivery_prob', 'rate_refill_per_min')
_COMPARE = {'>=': operator.ge, '<=': operator.le, '==': operator.eq, '>': operator.gt, '<': operator.lt}


# --- predicates -------------------------------------------------------------
# Each returns None when satisfied, otherwise a one-line reason.

def coverage_at_least(fraction: float, prefix: str = '') -> Predicate:
    def check(m: Metrics):
        short = {d: c for d, c in m.coverage.items() if d.startswith(prefix) and c < fraction}
        if not any(d.startswith(prefix) for d in m.coverage):
            return f"no documents under {prefix or '/'} were injected"
        if short:
            worst = min(short, key=short.get)
            return f"{len(short)} documents below coverage {fraction} (worst {worst}: {short[worst]:.3f})"
        return None
    return check


def rounds_at_most(limit: int) -> Predicate:
    def check(m: Metrics):
        late = {d: r for d, r in m.rounds_to_active.items() if r is None or r > limit}
        if late:
            doc = sorted(late)[0]
            return f"{len(late)} documents not active everywhere within {limit} rounds (e.g. {doc}: {late[doc]})"
        return None
    return check


def detection_within(rounds: float) -> Predicate:
    def check(m: Metrics):
        if m.detection_latency is None:
            return "equivocation was not detected by every correct peer"
        if m.detection_latency > rounds:
            return f"detection took {m.detection_latency:.1f} rounds (limit {rounds})"
        return None
    return check


def no_violations() -> Predicate:
    def check(m: Metrics):
        return f"{len(m.violations)} violations, first: {m.violations[0]}" if m.violations else None
    return check


def no_correct_peer_blacklisted(correct: Sequence[str]) -> Predicate:
    def check(m: Metrics):
        for peer, listed in sorted(m.blacklists.items()):
            if peer not in correct:
                continue
            bad = [p for p in listed if p in correct]
            if bad:
                return f"{peer} blacklisted correct peers {', '.join(bad)}"
        return None
    return check


def all_correct_blacklisted(offender: str, correct: Sequence[str]) -> Predicate:
    def check(m: Metrics):
        missing = [p for p in correct if p != offender and offender not in m.blacklists.get(p, [])]
        return f"{offender} not blacklisted by {', '.join(missing)}" if missing else None
    return check


def message_count_at_most(limit: int, verb: Optional[str] = None) -> Predicate:
    def check(m: Metrics):
        count = m.messages_by_type.get(verb, 0) if verb else m.total_messages
        return f"{count} {verb or 'messages'} sent (limit {limit})" if count > limit else None
    return check


def fetch_returned_version(version: int, peer: Optional[str] = None) -> Predicate:
    def check(m: Metrics):
        results = [r for r in m.fetch_results if peer is None or r['peer'] == peer]
        if not results:
            return "no fetch completed"
        wrong = [r for r in results if r['version'] != version]
        if wrong:
            r = wrong[0]
            return f"{len(wrong)}/{len(results)} fetches returned {r['version']} ({r['error'] or 'no error'})"
        return None
    return check


def acceptance_rate_at_most(originator: str, per_window: int, window: float = 60.0) -> Predicate:
    """No correct peer accepts more than per_window documents from originator in any window"""
    def check(m: Metrics):
        for peer, by_origin in sorted(m.acceptances.items()):
            times = sorted(by_origin.get(originator, []))
            start = 0
            for end, t in enumerate(times):
                while t - times[start] >= window:
                    start += 1
                if end - start + 1 > per_window:
                    return f"{peer} accepted {end - start + 1} documents from {originator} within {window:.0f}s"
        return None
    return check


# --- scenario files ---------------------------------------------------------

@dataclass
class Scenario:
    config: SimConfig
    predicates: List[Predicate] = field(default_factory=list)
    expectations: List[str] = field(default_factory=list)


@dataclass
class ScenarioResult:
    passed: bool
    report: List[str]
    metrics: Metrics

    def render(self) -> str:
        verdict = 'PASS' if self.passed else 'FAIL'
        if self.metrics.expected_fail:
            verdict += ' (adversaries reach the quorum; failure expected)'
        return '\n'.join([f"{verdict}"] + [f"  {line}" for line in self.report])


def _expectation(text: str, lineno: int) -> Predicate:
    fields = text.split()
    name = fields[0]
    try:
        if name == 'coverage':
            _check_op(fields[1], ('>=',), lineno)
            return coverage_at_least(float(fields[2]), fields[3] if len(fields) > 3 else '')
        if name == 'rounds_to_active':
            _check_op(fields[1], ('<=',), lineno)
            return rounds_at_most(int(fields[2]))
        if name == 'detection':
            _check_op(fields[1], ('<=',), lineno)
            return detection_within(float(fields[2]))
        if name == 'no_violations':
            return no_violations()
        if name == 'messages':
            _check_op(fields[1], ('<=',), lineno)
            return message_count_at_most(int(fields[2]), fields[3] if len(fields) > 3 else None)
        if name == 'fetch_version':
            return fetch_returned_version(int(fields[1]), fields[2] if len(fields) > 2 else None)
    except (IndexError, ValueError):
        raise ConfigError(f"line {lineno}: bad expectation {text!r}")
    raise ConfigError(f"line {lineno}: unknown expectation {name!r}")


def _check_op(op: str, allowed, lineno: int):
    if op not in allowed or op not in _COMPARE:
        raise ConfigError(f"line {lineno}: expected one of {', '.join(allowed)}, found {op!r}")


def _workload(fields: List[str], lineno: int) -> WorkloadEvent:
    shapes = {'inject': 3, 'fetch': 4, 'reconcile': 2, 'offline': 2}
    try:
        tick = int(fields[1])
        kind = fields[2]
    except (IndexError, ValueError):
        raise ConfigError(f"line {lineno}: expected 'at <tick> <action> ...'")
    if kind not in shapes:
        raise ConfigError(f"line {lineno}: unknown action {kind!r}")
    args = fields[3:]
    if len(args) != shapes[kind]:
        raise ConfigError(f"line {lineno}: {kind} takes {shapes[kind]} arguments")
    return WorkloadEvent(tick, kind, args[0], tuple(args[1:]))


def parse_scenario(text: str) -> Scenario:
    config = SimConfig()
    scenario = Scenario(config)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip() if not raw.lstrip().startswith('policy') else raw.strip()
        if not line:
            continue
        fields = line.split()
        head = fields[0]
        if head == 'at':
            config.workload.append(_workload(fields, lineno))
        elif head == 'adversary':
            if len(fields) != 3:
                raise ConfigError(f"line {lineno}: expected 'adversary <peer> <behaviour>'")
            config.adversaries[fields[1]] = fields[2]
        elif head == 'partition':
            try:
                config.partitions.append(Partition(int(fields[1]), int(fields[2]),
                                                   frozenset(fields[3].split(','))))
            except (IndexError, ValueError):
                raise ConfigError(f"line {lineno}: expected 'partition <start> <end> <peer,...>'")
        elif head == 'expect':
            expectation = line[len('expect'):].strip()
            scenario.predicates.append(_expectation(expectation, lineno))
            scenario.expectations.append(expectation)
        elif '=' in line:
            key, value = (part.strip() for part in line.split('=', 1))
            _set_option(config, key, value, lineno)
        else:
            raise ConfigError(f"line {lineno}: cannot parse {line!r}")
    config.validate()
    return scenario


def _set_option(config: SimConfig, key: str, value: str, lineno: int):
    try:
        if key in _INT_KEYS:
            setattr(config, key, int(value))
        elif key in _FLOAT_KEYS:
            setattr(config, key, float(value))
        elif key == 'latency':
            low, _, high = value.partition('-')
            config.latency = (int(low), int(high or low))
        elif key in ('policy', 'label'):
            setattr(config, key, value)
        elif key == 'trace':
            config.trace = value.lower() in ('1', 'true', 'yes', 'on')
        else:
            raise ConfigError(f"line {lineno}: unknown setting {key!r}")
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}")


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e}")
    scenario = parse_scenario(text)
    if scenario.config.label == 'scenario':
        scenario.config.label = path
    return scenario


def assert_scenario(config: SimConfig, predicates: Sequence[Predicate]) -> ScenarioResult:
    """Run once and check every predicate; the report lists each failure"""
    metrics = run(config)
    report = []
    for predicate in predicates:
        reason = predicate(metrics)
        if reason is not None:
            report.append(reason)
    passed = not report
    if passed:
        report.append(f"all {len(predicates)} checks held after {metrics.rounds} rounds")
    logger.info(f"{config.label} seed {config.seed}: {'pass' if passed else 'fail'}")
    return ScenarioResult(passed, report, metrics)


def run_scenario(scenario: Scenario, seeds: Optional[Sequence[int]] = None) -> List[ScenarioResult]:
    seeds = list(seeds) if seeds else [scenario.config.seed]
    results = []
    for seed in seeds:
        config = replace(scenario.config, seed=seed)
        results.append(assert_scenario(config, scenario.predicates))
    return results


# --- built-in scenarios -----------------------------------------------------

def _injects(peers: Sequence[str], count: int, start: int = 0, spacing: int = 5,
             prefix: str = '/docs') -> List[WorkloadEvent]:
    return [WorkloadEvent(start + i * spacing, 'inject', peers[i % len(peers)], (f"{prefix}/d{i}", '128'))
            for i in range(count)]


def honest_spread(seed: int = 0) -> SimConfig:
    """16 peers, 10% loss, quorum of 9: every document active everywhere"""
    names = [f"P{i}" for i in range(1, 17)]
    return SimConfig(n_peers=16, seed=seed, delivery_prob=0.9, max_rounds=50,
                     policy='path /** { authors: any; active: quorum(9, {all}); }',
                     workload=_injects(names, 8), label='honest-spread')


def silent_droppers(seed: int = 0) -> SimConfig:
    """Three of 16 peers swallow every offer; fanout 4 still reaches every correct peer"""
    return SimConfig(n_peers=16, seed=seed, fanout=4, initial_fanout=4, max_rounds=60,
                     adversaries={'P2': 'silentdrop', 'P3': 'silentdrop', 'P4': 'silentdrop'},
                     policy='path /** { authors: any; active: quorum(9, {all}); }',
                     workload=_injects(['P1', 'P5', 'P6'], 6), label='silent-droppers')


def equivocator(seed: int = 0) -> SimConfig:
    """P1 originates two contents for one version; quorum(12) over 16 peers"""
    return SimConfig(n_peers=16, seed=seed, max_rounds=40,
                     adversaries={'P1': 'equivocate'},
                     policy='path /** { authors: any; active: quorum(12, {all}); }',
                     workload=[WorkloadEvent(0, 'inject', 'P1', ('/docs/split', '64'))],
                     label='equivocator')


def stale_server(seed: int = 0, fetches: int = 100) -> SimConfig:
    """Two stale servers; redundant reads with f=2 still return version 2"""
    workload = [WorkloadEvent(0, 'inject', 'P1', ('/docs/versioned', '64'), b'version one'),
                WorkloadEvent(200, 'inject', 'P1', ('/docs/versioned', '64'), b'version two')]
    readers = ['P4', 'P5', 'P6', 'P7', 'P8']
    workload.extend(WorkloadEvent(600 + i, 'fetch', readers[i % len(readers)], ('/docs/versioned', '@', '2'))
                    for i in range(fetches))
    return SimConfig(n_peers=8, seed=seed, max_rounds=80,
                     adversaries={'P2': 'staleserve', 'P3': 'staleserve'},
                     policy='path /** { authors: any; active: quorum(5, {all}); }',
                     workload=workload, label='stale-server')


def flooder(seed: int = 0) -> SimConfig:
    """P8 injects 100 documents a round; honest documents still activate"""
    return SimConfig(n_peers=8, seed=seed, max_rounds=30, rate_capacity=10, rate_refill_per_min=10.0,
                     adversaries={'P8': 'flood'},
                     workload=_injects(['P1', 'P2', 'P3'], 3, start=10), label='flooder')


def stripper(seed: int = 0) -> SimConfig:
    """P2 strips other signers' records from what it forwards"""
    config = honest_spread(seed)
    config.n_peers = 12
    config.policy = 'path /** { authors: any; active: quorum(7, {all}); }'
    config.workload = _injects(['P1', 'P3', 'P4'], 6)
    config.adversaries = {'P2': 'stripoffers'}
    config.label = 'stripper'
    return config


def catch_up(seed: int = 0, documents: int = 50) -> SimConfig:
    """P8 misses 50 documents while offline, then reconciles with P1"""
    workload = [WorkloadEvent(0, 'offline', 'P8', ('400',))]
    workload.extend(_injects([f"P{i}" for i in range(1, 8)], documents, start=1, spacing=2, prefix='/backlog'))
    workload.append(WorkloadEvent(420, 'reconcile', 'P8', ('P1',)))
    return SimConfig(n_peers=8, seed=seed, max_rounds=80, rate_capacity=100, rate_refill_per_min=600.0,
                     policy='path /** { authors: any; active: quorum(5, {all}); }',
                     workload=workload, label='catch-up')


BUILTIN: Dict[str, Callable[..., SimConfig]] = {
    'honest': honest_spread,
    'silentdrop': silent_droppers,
    'equivocate': equivocator,
    'staleserve': stale_server,
    'flood': flooder,
    'strip': stripper,
    'catchup': catch_up,
}


def builtin(name: str, seed: int = 0) -> SimConfig:
    try:
        return BUILTIN[name](seed)
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r} (choose from {', '.join(sorted(BUILTIN))})")
