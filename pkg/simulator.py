"""
Deterministic discrete-event simulator: n replication engines over a lossy,
delayed network with optional Byzantine behaviours.

Virtual time is integer ticks; one protocol round is round_ticks ticks.
Every random draw comes from one seeded generator, so identical configs
give identical message traces.
"""

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
import simpy

from adversaries import Behavior, make_behavior
from database import DocumentDatabase
from documents import DocRef, DocumentId, DocumentStatus, parse_version_sel
from engine import (Action, EngineConfig, FetchCompleted, PeerBlacklisted, ReconcileCompleted,
                    ReplicationEngine, Send, StatusChanged)
from errors import ConfigError, DdnfsError, describe
from identity import KeyPair, PeerId, Role, generate_keypair
from policy import Peerlist, PeerEntry, Quorum, make_peerlist_body, parse_peerlist
from signatures import verify_block
from wire import GetAnswer, HeadAnswer, Ihave, describe as describe_frame, encode, verb_of

try:
    from config import FANOUT, INITIAL_FANOUT, RATE_CAPACITY, RATE_REFILL_PER_MIN
except ImportError:
    FANOUT = 3
    INITIAL_FANOUT = 4
    RATE_CAPACITY = 10
    RATE_REFILL_PER_MIN = 10.0

logger = logging.getLogger(__name__)

WORKLOAD_KINDS = ('inject', 'fetch', 'reconcile', 'offline')


@dataclass(frozen=True)
class WorkloadEvent:
    tick: int
    kind: str
    peer: str
    args: Tuple[str, ...] = ()
    content: Optional[bytes] = None


@dataclass(frozen=True)
class Partition:
    start: int
    end: int
    peers: frozenset


@dataclass
class SimConfig:
    n_peers: int = 8
    seed: int = 0
    n_admins: int = 0
    adversaries: Dict[str, str] = field(default_factory=dict)
    delivery_prob: float = 1.0
    latency: Tuple[int, int] = (1, 3)
    ticks_per_second: int = 10
    round_ticks: int = 20
    max_rounds: int = 50
    fanout: int = FANOUT
    initial_fanout: int = INITIAL_FANOUT
    rate_capacity: int = RATE_CAPACITY
    rate_refill_per_min: float = RATE_REFILL_PER_MIN
    request_timeout_rounds: int = 3
    policy: str = ''
    partitions: List[Partition] = field(default_factory=list)
    workload: List[WorkloadEvent] = field(default_factory=list)
    trace: bool = False
    label: str = 'scenario'

    def peer_names(self) -> List[str]:
        return [f"P{i}" for i in range(1, self.n_peers + 1)]

    def admin_names(self) -> List[str]:
        return [f"A{i}" for i in range(1, self.n_admins + 1)]

    def policy_text(self) -> str:
        """The policy with '{all}' expanded to every ordinary peer"""
        return self.policy.replace('{all}', '{' + ','.join(self.peer_names()) + '}')

    def validate(self):
        if self.n_peers < 1:
            raise ConfigError("n_peers must be at least 1")
        if not 0.0 <= self.delivery_prob <= 1.0:
            raise ConfigError("delivery_prob must lie in [0, 1]")
        low, high = self.latency
        if low < 0 or high < low:
            raise ConfigError(f"bad latency range {self.latency}")
        if self.round_ticks < 1 or self.max_rounds < 1 or self.ticks_per_second < 1:
            raise ConfigError("round_ticks, max_rounds and ticks_per_second must be positive")
        if self.fanout < 1 or self.initial_fanout < 1:
            raise ConfigError("fanouts must be at least 1")
        names = set(self.peer_names()) | set(self.admin_names())
        for name in self.adversaries:
            if name not in names:
                raise ConfigError(f"adversary {name} is not a simulated peer")
        for event in self.workload:
            if event.kind not in WORKLOAD_KINDS:
                raise ConfigError(f"unknown workload action {event.kind!r}")
            if event.peer not in names:
                raise ConfigError(f"workload names unknown peer {event.peer}")


@dataclass
class Metrics:
    rounds: int = 0
    rounds_to_active: Dict[str, Optional[int]] = field(default_factory=dict)
    coverage: Dict[str, float] = field(default_factory=dict)
    coverage_timeline: List[Tuple[int, float]] = field(default_factory=list)
    messages_by_type: Dict[str, int] = field(default_factory=dict)
    messages_dropped: int = 0
    duplicate_offers: int = 0
    detection_latency: Optional[float] = None
    bytes_per_peer: Dict[str, int] = field(default_factory=dict)
    blacklists: Dict[str, List[str]] = field(default_factory=dict)
    fetch_results: List[dict] = field(default_factory=list)
    reconcile_results: List[dict] = field(default_factory=list)
    acceptances: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    peer_stats: Dict[str, Dict[str, int]] = field(default_factory=dict)
    violations: List[str] = field(default_factory=list)
    workload_errors: List[str] = field(default_factory=list)
    trace: List[str] = field(default_factory=list)
    trace_digest: str = ''
    expected_fail: bool = False

    @property
    def total_messages(self) -> int:
        return sum(self.messages_by_type.values())

    def to_records(self) -> List[dict]:
        """Line-delimited structured records, one per measured item"""
        records = [{'record': 'run', 'rounds': self.rounds, 'messages': self.total_messages,
                    'dropped': self.messages_dropped, 'duplicates': self.duplicate_offers,
                    'detection_latency': self.detection_latency, 'trace_digest': self.trace_digest,
                    'expected_fail': self.expected_fail, 'violations': len(self.violations)}]
        for doc, coverage in sorted(self.coverage.items()):
            records.append({'record': 'document', 'document': doc, 'coverage': coverage,
                            'rounds_to_active': self.rounds_to_active.get(doc)})
        for verb, count in sorted(self.messages_by_type.items()):
            records.append({'record': 'messages', 'type': verb, 'count': count})
        for peer, sent in sorted(self.bytes_per_peer.items()):
            records.append({'record': 'peer', 'peer': peer, 'bytes_sent': sent,
                            'blacklisted': self.blacklists.get(peer, [])})
        for result in self.fetch_results:
            records.append({'record': 'fetch', **result})
        for violation in self.violations:
            records.append({'record': 'violation', 'detail': violation})
        return records

    def to_jsonl(self) -> str:
        return '\n'.join(json.dumps(r, sort_keys=True) for r in self.to_records()) + '\n'

    def summary(self) -> str:
        covered = [c for c in self.coverage.values()]
        lines = [
            f"rounds run: {self.rounds}",
            f"documents: {len(self.coverage)} (mean coverage {np.mean(covered) if covered else 0.0:.3f})",
            f"messages: {self.total_messages} ({', '.join(f'{k} {v}' for k, v in sorted(self.messages_by_type.items()))})",
            f"dropped: {self.messages_dropped}, duplicate offers: {self.duplicate_offers}",
        ]
        done = [r for r in self.rounds_to_active.values() if r is not None]
        if done:
            lines.append(f"rounds to active: max {max(done)}, mean {np.mean(done):.2f}")
        if self.detection_latency is not None:
            lines.append(f"detection latency: {self.detection_latency:.1f} rounds")
        if self.violations:
            lines.append(f"INVARIANT VIOLATIONS: {len(self.violations)}")
        lines.append(f"trace digest: {self.trace_digest}")
        return '\n'.join(lines)


@dataclass
class SimPeer:
    name: str
    keypair: KeyPair
    peer_id: PeerId
    engine: ReplicationEngine
    behavior: Behavior = None
    offline_until: int = -1

    def online(self, tick: float) -> bool:
        return tick >= self.offline_until

    @property
    def honest(self) -> bool:
        return self.behavior.honest


def sim_keypair(seed: int, name: str) -> KeyPair:
    return generate_keypair(hashlib.sha256(f"{seed}:{name}".encode('utf-8')).digest())


def _quorum_sizes(expr) -> List[int]:
    if isinstance(expr, Quorum):
        return [expr.k]
    sizes = []
    for part in ('left', 'right'):
        if hasattr(expr, part):
            sizes.extend(_quorum_sizes(getattr(expr, part)))
    return sizes


class Simulation:
    """One simulated peer group; run() drives it to quiescence or max_rounds"""

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.env = simpy.Environment()
        self.rng = np.random.default_rng(config.seed)
        self.metrics = Metrics()
        self.round = 0
        self.in_flight = 0
        self.workload_pending = 0
        self._trace_hash = hashlib.sha256()
        self._messages: Counter = Counter()
        self._bytes: Counter = Counter()
        self.inject_ticks: Dict[DocumentId, float] = {}
        self.activations: Dict[DocumentId, Dict[str, float]] = {}
        self.blacklist_events: List[Tuple[float, str, str, str]] = []
        self._records: Dict[Tuple[PeerId, DocRef], Set[bytes]] = {}

        self.peers: Dict[str, SimPeer] = {}
        self.by_id: Dict[PeerId, SimPeer] = {}
        self.peerlist = self._build_peerlist()
        self.metrics.expected_fail = self._expected_fail()

    # --- setup --------------------------------------------------------------

    def _build_peerlist(self) -> Peerlist:
        config = self.config
        keys = {}
        entries = []
        for index, name in enumerate(config.peer_names(), start=1):
            keys[name] = sim_keypair(config.seed, name)
            entries.append(PeerEntry(keys[name].peer_id(), keys[name].public,
                                     f"10.0.{index // 250}.{index % 250 + 1}:7000", Role.PEER, name))
        for name in config.admin_names():
            keys[name] = sim_keypair(config.seed, name)
            entries.append(PeerEntry(keys[name].peer_id(Role.ADMIN), keys[name].public, '-', Role.ADMIN, name))

        try:
            peerlist = parse_peerlist(make_peerlist_body(entries, config.policy_text()), 0)
        except DdnfsError as e:
            raise ConfigError(f"scenario peerlist invalid: {describe(e)}")

        for index, name in enumerate(config.peer_names() + config.admin_names()):
            engine_config = EngineConfig(
                fanout=config.fanout,
                initial_fanout=config.initial_fanout,
                rate_capacity=config.rate_capacity,
                rate_refill_per_min=config.rate_refill_per_min,
                round_interval=config.round_ticks / config.ticks_per_second,
                request_timeout=config.request_timeout_rounds * config.round_ticks / config.ticks_per_second,
                seed=config.seed * 1000 + index,
            )
            engine = ReplicationEngine(keys[name], peerlist, DocumentDatabase(), engine_config)
            peer = SimPeer(name, keys[name], engine.self_id, engine)
            peer.behavior = make_behavior(config.adversaries.get(name, 'honest'), engine, name)
            self.peers[name] = peer
            self.by_id[peer.peer_id] = peer
        return peerlist

    def _expected_fail(self) -> bool:
        """Adversaries at or above the smallest quorum the policy uses"""
        if not self.config.adversaries:
            return False
        sizes = []
        group = self.peerlist.group()
        for rule in self.peerlist.rules or []:
            sizes.extend(_quorum_sizes(rule.activeness))
        if not sizes:
            sizes = [len(group) // 2 + 1]
        return len(self.config.adversaries) >= min(sizes)

    @property
    def now(self) -> float:
        return self.env.now / self.config.ticks_per_second

    def correct_peers(self) -> List[SimPeer]:
        """Honest ordinary peers, the population coverage is measured over"""
        return [p for p in self.peers.values()
                if p.honest and self.peerlist.role_of(p.peer_id) == Role.PEER]

    def name_of(self, peer_id: PeerId) -> str:
        peer = self.by_id.get(peer_id)
        return peer.name if peer else peer_id.short()

    # --- network ------------------------------------------------------------

    def _link_down(self, a: SimPeer, b: SimPeer) -> bool:
        tick = self.env.now
        for partition in self.config.partitions:
            if partition.start <= tick < partition.end and ((a.name in partition.peers) != (b.name in partition.peers)):
                return True
        return False

    def _transmit(self, src: SimPeer, send: Send):
        send = src.behavior.outgoing(send)
        if send is None:
            return
        dst = self.by_id.get(send.to)
        if dst is None:
            return
        verb = verb_of(send.message)
        data = encode(send.tag, send.message)
        self._messages[verb] += 1
        self._bytes[src.name] += len(data)
        line = f"{self.env.now} {src.name}->{dst.name} {describe_frame(send.tag, send.message)}"
        self._trace_hash.update(line.encode('utf-8') + b'\n')
        if self.config.trace:
            self.metrics.trace.append(line)
        if src.honest:
            self._check_outgoing(src, send)

        if not src.online(self.env.now) or self._link_down(src, dst) or self.rng.random() >= self.config.delivery_prob:
            self.metrics.messages_dropped += 1
            return
        low, high = self.config.latency
        latency = int(self.rng.integers(low, high + 1))
        self.in_flight += 1
        self.env.process(self._deliver(src, dst, send.tag, send.message, latency))

    def _deliver(self, src: SimPeer, dst: SimPeer, tag: str, message, latency: int):
        yield self.env.timeout(latency)
        self.in_flight -= 1
        if not dst.online(self.env.now):
            self.metrics.messages_dropped += 1
            return
        self._apply(dst, dst.behavior.receive(src.peer_id, tag, message, self.now))

    def _check_outgoing(self, src: SimPeer, send: Send):
        """Sign-once and no-unverified-forwarding checks on what honest peers emit"""
        message = send.message
        blocks = []
        if isinstance(message, Ihave):
            blocks = [message.block]
            try:
                verify_block(message.doc_ref, message.block, src.engine.peerlist.directory())
            except DdnfsError as e:
                self.metrics.violations.append(f"{src.name} forwarded an unverifiable block: {describe(e)}")
        elif isinstance(message, GetAnswer) and message.status == 'ok':
            blocks = [message.block]
        elif isinstance(message, HeadAnswer):
            blocks = [block for _, block in message.entries]
        for block in blocks:
            for record in block.records:
                signer = self.by_id.get(record.signer)
                if signer is None or not signer.honest:
                    continue
                sigs = self._records.setdefault((record.signer, block.doc_ref), set())
                sigs.add(record.sig)
                if len(sigs) == 2:
                    self.metrics.violations.append(f"{signer.name} signed {block.doc_ref.id} twice")

    # --- actions ------------------------------------------------------------

    def _apply(self, peer: SimPeer, actions: List[Action]):
        for action in actions:
            if isinstance(action, Send):
                self._transmit(peer, action)
            elif isinstance(action, StatusChanged):
                if action.new == DocumentStatus.ACTIVE:
                    self.activations.setdefault(action.doc_id, {}).setdefault(peer.name, self.env.now)
            elif isinstance(action, PeerBlacklisted):
                target = self.name_of(action.peer)
                self.blacklist_events.append((self.env.now, peer.name, target, action.reason))
                offender = self.by_id.get(action.peer)
                if peer.honest and offender is not None and offender.honest:
                    self.metrics.violations.append(f"correct peer {peer.name} blacklisted correct peer {target}")
            elif isinstance(action, FetchCompleted):
                self.metrics.fetch_results.append({
                    'peer': peer.name,
                    'fetch_id': action.fetch_id,
                    'tick': self.env.now,
                    'path': action.document.path if action.document else None,
                    'version': action.document.version if action.document else None,
                    'error': describe(action.error) if action.error else None,
                })
            elif isinstance(action, ReconcileCompleted):
                self.metrics.reconcile_results.append({
                    'peer': peer.name, 'helper': self.name_of(action.helper), 'tick': self.env.now,
                    'fetched': action.fetched, 'offered': action.offered,
                    'error': describe(action.error) if action.error else None,
                })

    # --- workload -----------------------------------------------------------

    def _content(self, event: WorkloadEvent) -> bytes:
        if event.content is not None:
            return event.content
        size = int(event.args[1]) if len(event.args) > 1 else 64
        return self.rng.bytes(size)

    def _run_event(self, event: WorkloadEvent):
        yield self.env.timeout(event.tick)
        self.workload_pending -= 1
        peer = self.peers[event.peer]
        now = self.now
        try:
            if event.kind == 'offline':
                peer.offline_until = int(event.args[0])
                logger.info(f"{peer.name} offline until tick {peer.offline_until}")
                return
            if not peer.online(self.env.now):
                logger.info(f"{peer.name} is offline; skipping {event.kind}")
                return
            if event.kind == 'inject':
                actions = peer.behavior.inject(event.args[0], self._content(event), now)
                self._note_injected(peer, event.args[0], actions)
            elif event.kind == 'fetch':
                path, sel, tolerated = event.args[0], parse_version_sel(event.args[1]), int(event.args[2])
                _, actions = peer.engine.fetch_redundant(path, sel, tolerated, now)
            else:
                actions = peer.engine.reconcile(self.peers[event.args[0]].peer_id, now)
        except DdnfsError as e:
            logger.warning(f"Workload {event.kind} at {peer.name} failed: {describe(e)}")
            self.metrics.workload_errors.append(f"{event.kind} at {peer.name}: {describe(e)}")
            return
        self._apply(peer, actions)

    def _note_injected(self, peer: SimPeer, path: str, actions: List[Action]):
        if not peer.honest:
            logger.debug(f"{peer.name} ran a rogue inject of {path}")
            return
        for action in actions:
            if isinstance(action, StatusChanged) and action.old is None:
                self.inject_ticks.setdefault(action.doc_id, self.env.now)

    def _ticker(self):
        every = max(1, self.config.round_ticks // 4)
        while True:
            yield self.env.timeout(every)
            for name in sorted(self.peers):
                peer = self.peers[name]
                if peer.online(self.env.now):
                    self._apply(peer, peer.behavior.tick(self.now))

    # --- main loop ----------------------------------------------------------

    def _quiescent(self) -> bool:
        if self.in_flight or self.workload_pending:
            return False
        for peer in self.peers.values():
            if not peer.honest or not peer.online(self.env.now):
                continue
            engine = peer.engine
            if not engine.is_idle():
                return False
            for stored in engine.store.documents():
                if stored.status == DocumentStatus.PENDING and stored.block.originator not in engine.state.blacklist:
                    return False
        return True

    def _snapshot(self):
        correct = self.correct_peers()
        docs = list(self.inject_ticks)
        if not docs or not correct:
            self.metrics.coverage_timeline.append((self.round, 0.0))
            return
        fractions = [len([p for p in correct if p.name in self.activations.get(d, {})]) / len(correct)
                     for d in docs]
        self.metrics.coverage_timeline.append((self.round, float(np.mean(fractions))))

    def run(self) -> Metrics:
        config = self.config
        logger.info(f"Simulating {config.label}: {config.n_peers} peers, seed {config.seed}")
        for event in sorted(config.workload, key=lambda e: e.tick):
            self.workload_pending += 1
            self.env.process(self._run_event(event))
        self.env.process(self._ticker())

        while self.round < config.max_rounds:
            for name in sorted(self.peers):
                peer = self.peers[name]
                if peer.online(self.env.now):
                    self._apply(peer, peer.behavior.on_round(self.round, self.now))
            self.env.run(until=(self.round + 1) * config.round_ticks)
            self.round += 1
            self._snapshot()
            if self._quiescent():
                break
        return self._finish()

    def _finish(self) -> Metrics:
        metrics = self.metrics
        config = self.config
        correct = self.correct_peers()
        metrics.rounds = self.round
        metrics.messages_by_type = dict(self._messages)
        metrics.bytes_per_peer = {name: self._bytes.get(name, 0) for name in sorted(self.peers)}
        metrics.trace_digest = self._trace_hash.hexdigest()

        for doc_id, injected in sorted(self.inject_ticks.items()):
            activated = self.activations.get(doc_id, {})
            reached = [activated[p.name] for p in correct if p.name in activated]
            metrics.coverage[str(doc_id)] = len(reached) / len(correct) if correct else 0.0
            if correct and len(reached) == len(correct):
                metrics.rounds_to_active[str(doc_id)] = math.ceil((max(reached) - injected) / config.round_ticks)
            else:
                metrics.rounds_to_active[str(doc_id)] = None

        for peer in self.peers.values():
            state = peer.engine.state
            metrics.duplicate_offers += state.stats.get('duplicates', 0)
            metrics.peer_stats[peer.name] = dict(state.stats)
            metrics.blacklists[peer.name] = sorted(self.name_of(p) for p in state.blacklist)
            metrics.acceptances[peer.name] = {self.name_of(o): list(times)
                                              for o, times in sorted(state.acceptances.items())}

        metrics.detection_latency = self._detection_latency(correct)
        return metrics

    def _detection_latency(self, correct: List[SimPeer]) -> Optional[float]:
        """Rounds from the first equivocation verdict to the last correct peer's"""
        equivocations = [e for e in self.blacklist_events if e[3].startswith('equivocation')]
        if not equivocations:
            return None
        first = min(e[0] for e in equivocations)
        target = equivocations[0][2]
        judged = {e[1]: e[0] for e in equivocations if e[2] == target}
        if any(p.name not in judged for p in correct if p.name != target):
            return None
        return (max(judged.values()) - first) / self.config.round_ticks


def run(config: SimConfig) -> Metrics:
    """Run one scenario to quiescence or max_rounds"""
    return Simulation(config).run()
