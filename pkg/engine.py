"""
Per-peer replication engine.

A deterministic state machine: every input (received message, timer tick
or local command) returns a list of Actions for the caller to carry out.
The engine never touches sockets; it owns the document store.
"""

import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from database import DocumentDatabase, StoredDocument
from documents import (DocRef, Document, DocumentId, DocumentStatus, Selector, VersionSel,
                       make_document, path_match)
from errors import (AllFailed, AlreadySigned, ConflictingRecord, DdnfsError, DigestMismatch,
                    HelperUnreachable, Inconsistent, LengthMismatch, NotAdmin, NotAuthorized, NotFound, StoreFull,
                    UnknownSigner, describe)
from identity import KeyPair, PeerId, Role, verify
from policy import Peerlist, parse_peerlist, validate_peerlist_update
from signatures import (SignatureBlock, SignatureRecord, merge_blocks, sign_document,
                        signing_payload, verify_block)
from wire import Get, GetAnswer, Head, HeadAnswer, Ihave, Message, TagCounter

try:
    from config import (FANOUT, HEAD_CAP, INITIAL_FANOUT, PEERLIST_PATH, PROBE_ROUNDS,
                        RATE_CAPACITY, RATE_REFILL_PER_MIN, REQUEST_TIMEOUT, ROUND_INTERVAL,
                        SUSPECT_THRESHOLD)
except ImportError:
    FANOUT = 3
    INITIAL_FANOUT = 4
    RATE_CAPACITY = 10
    RATE_REFILL_PER_MIN = 10.0
    SUSPECT_THRESHOLD = 10
    REQUEST_TIMEOUT = 10.0
    ROUND_INTERVAL = 2.0
    PROBE_ROUNDS = 4
    HEAD_CAP = 1000
    PEERLIST_PATH = "/peerlist"

logger = logging.getLogger(__name__)


# --- actions ----------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    to: PeerId
    tag: str
    message: Message


@dataclass(frozen=True)
class StatusChanged:
    doc_id: DocumentId
    old: Optional[DocumentStatus]
    new: DocumentStatus


@dataclass(frozen=True)
class PeerBlacklisted:
    peer: PeerId
    reason: str


@dataclass(frozen=True)
class FetchCompleted:
    fetch_id: int
    document: Optional[Document]
    block: Optional[SignatureBlock]
    error: Optional[DdnfsError] = None


@dataclass(frozen=True)
class HeadCompleted:
    peer: PeerId
    pattern: str
    status: str
    entries: Tuple[Tuple[DocRef, SignatureBlock], ...]


@dataclass(frozen=True)
class ReconcileCompleted:
    helper: PeerId
    fetched: int
    offered: int
    error: Optional[DdnfsError] = None


@dataclass(frozen=True)
class PeerlistChanged:
    old_version: int
    new_version: int


Action = Union[Send, StatusChanged, PeerBlacklisted, FetchCompleted, HeadCompleted,
               ReconcileCompleted, PeerlistChanged]


# --- state ------------------------------------------------------------------

@dataclass
class EngineConfig:
    fanout: int = FANOUT
    initial_fanout: int = INITIAL_FANOUT
    rate_capacity: int = RATE_CAPACITY
    rate_refill_per_min: float = RATE_REFILL_PER_MIN
    suspect_threshold: int = SUSPECT_THRESHOLD
    request_timeout: float = REQUEST_TIMEOUT
    round_interval: float = ROUND_INTERVAL
    probe_rounds: int = PROBE_ROUNDS
    head_cap: int = HEAD_CAP
    replay_factor: int = 3
    seed: int = 0


@dataclass(frozen=True)
class ConflictEvidence:
    """Two originator records over the same (path, version) with different content"""
    originator: PeerId
    first_ref: DocRef
    first: SignatureRecord
    second_ref: DocRef
    second: SignatureRecord

    @classmethod
    def from_blocks(cls, a: SignatureBlock, b: SignatureBlock) -> 'ConflictEvidence':
        first, second = sorted((a, b), key=lambda blk: blk.doc_ref.content_digest)
        return cls(first.originator, first.doc_ref, first.originator_record(),
                   second.doc_ref, second.originator_record())

    def verify(self, directory: Dict[PeerId, bytes]) -> bool:
        """Self-proving: both records verify under the same originator key"""
        if self.first_ref.id != self.second_ref.id:
            return False
        if self.first_ref.content_digest == self.second_ref.content_digest:
            return False
        key = directory.get(self.originator)
        if key is None:
            return False
        for ref, record in ((self.first_ref, self.first), (self.second_ref, self.second)):
            if record.signer != self.originator or record.chain:
                return False
            if not verify(key, signing_payload(ref, (), []), record.sig):
                return False
        return True

    def to_json(self) -> dict:
        def ref_json(ref: DocRef) -> dict:
            return {'path': ref.path, 'version': ref.version, 'size': ref.size,
                    'digest': ref.content_digest.hex()}
        return {
            'originator': self.originator.hex,
            'first': ref_json(self.first_ref), 'first_sig': self.first.sig.hex(),
            'second': ref_json(self.second_ref), 'second_sig': self.second.sig.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> 'ConflictEvidence':
        originator = PeerId.from_hex(data['originator'])

        def ref_of(d: dict) -> DocRef:
            return DocRef(d['path'], d['version'], d['size'], bytes.fromhex(d['digest']))
        return cls(originator,
                   ref_of(data['first']), SignatureRecord(originator, (), bytes.fromhex(data['first_sig'])),
                   ref_of(data['second']), SignatureRecord(originator, (), bytes.fromhex(data['second_sig'])))


@dataclass
class BlacklistEntry:
    reason: str
    since: float
    evidence: Optional[ConflictEvidence] = None


@dataclass
class OfferCampaign:
    doc_ref: DocRef
    fanout: int
    round: int = 0
    offered_to: Set[PeerId] = field(default_factory=set)
    next_due: float = 0.0
    exhausted: bool = False
    extra: bool = False


@dataclass
class TokenBucket:
    capacity: int
    refill_per_min: float
    tokens: float
    updated: float

    def take(self, now: float) -> bool:
        elapsed = max(0.0, now - self.updated)
        self.tokens = min(float(self.capacity), self.tokens + elapsed * self.refill_per_min / 60.0)
        self.updated = now
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


@dataclass
class Request:
    kind: str  # acquire | fetch | head
    sent_at: float
    doc_ref: Optional[DocRef] = None
    fetch_id: Optional[int] = None
    pattern: Optional[str] = None
    reconcile: bool = False


@dataclass
class Acquisition:
    doc_ref: DocRef
    sources: List[PeerId]
    tried: Set[PeerId] = field(default_factory=set)
    extra: bool = False


@dataclass
class FetchState:
    fetch_id: int
    path: str
    version_sel: VersionSel
    tolerated: int
    waiting: Set[PeerId]
    answers: List[Tuple[PeerId, Document, SignatureBlock]] = field(default_factory=list)
    failed: Dict[PeerId, str] = field(default_factory=dict)


@dataclass
class ReconcileState:
    helper: PeerId
    started: float
    outstanding: int = 0
    queried: Set[str] = field(default_factory=set)
    fetched: int = 0
    offered: int = 0
    answered: bool = False
    error: Optional[DdnfsError] = None


@dataclass
class PeerState:
    keypair: KeyPair
    self_id: PeerId
    peerlist: Peerlist
    store: DocumentDatabase
    config: EngineConfig
    rng: random.Random
    pending: Dict[DocumentId, OfferCampaign] = field(default_factory=dict)
    blacklist: Dict[PeerId, BlacklistEntry] = field(default_factory=dict)
    buckets: Dict[PeerId, TokenBucket] = field(default_factory=dict)
    seen_offers: Dict[DocRef, Dict[bytes, int]] = field(default_factory=dict)
    offers: Dict[DocumentId, Dict[bytes, SignatureBlock]] = field(default_factory=dict)
    outstanding: Dict[Tuple[PeerId, str], Request] = field(default_factory=dict)
    acquisitions: Dict[DocRef, Acquisition] = field(default_factory=dict)
    fetches: Dict[int, FetchState] = field(default_factory=dict)
    reconciles: Dict[PeerId, ReconcileState] = field(default_factory=dict)
    offer_history: Dict[DocumentId, Set[PeerId]] = field(default_factory=dict)
    offered_docs: Dict[PeerId, Set[DocumentId]] = field(default_factory=dict)
    signed_seen: Dict[PeerId, Set[DocumentId]] = field(default_factory=dict)
    suspect_failures: Counter = field(default_factory=Counter)
    known_versions: Dict[str, int] = field(default_factory=dict)
    evidence_pushed: Set[Tuple[PeerId, DocumentId]] = field(default_factory=set)
    acceptances: Dict[PeerId, List[float]] = field(default_factory=dict)
    stats: Counter = field(default_factory=Counter)
    tags: TagCounter = field(default_factory=TagCounter)
    fetch_counter: int = 0


class ReplicationEngine:
    """Offer handling, fetch-verify-sign-reoffer, activeness and blacklisting for one peer"""

    def __init__(self, keypair: KeyPair, peerlist: Peerlist,
                 store: Optional[DocumentDatabase] = None, config: Optional[EngineConfig] = None):
        config = config or EngineConfig()
        store = store if store is not None else DocumentDatabase()
        self.state = PeerState(
            keypair=keypair,
            self_id=peerlist.peer_id(keypair.peer_id()),
            peerlist=peerlist,
            store=store,
            config=config,
            rng=random.Random(config.seed),
        )
        self._restore()

    # --- small helpers ------------------------------------------------------

    @property
    def self_id(self) -> PeerId:
        return self.state.self_id

    @property
    def peerlist(self) -> Peerlist:
        return self.state.peerlist

    @property
    def store(self) -> DocumentDatabase:
        return self.state.store

    def _restore(self):
        st = self.state
        for hex_id, entry in sorted((st.store.load_state('blacklist', {}) or {}).items()):
            evidence = ConflictEvidence.from_json(entry['evidence']) if entry.get('evidence') else None
            st.blacklist[PeerId.from_hex(hex_id)] = BlacklistEntry(entry['reason'], entry['since'], evidence)
        try:
            stored = st.store.get(PEERLIST_PATH, Selector.ACTIVE)
        except NotFound:
            return
        if stored.id.version > st.peerlist.version:
            try:
                self._install_peerlist(parse_peerlist(stored.document.content, stored.id.version))
            except DdnfsError as e:
                logger.error(f"Stored peerlist {stored.id} unusable: {describe(e)}")

    def _install_peerlist(self, peerlist: Peerlist):
        self.state.peerlist = peerlist
        self.state.self_id = peerlist.peer_id(self.state.keypair.peer_id())

    def _persist_blacklist(self):
        data = {peer.hex: {'reason': e.reason, 'since': e.since,
                           'evidence': e.evidence.to_json() if e.evidence else None}
                for peer, e in self.state.blacklist.items()}
        self.state.store.save_state('blacklist', data)

    def _request(self, to: PeerId, message: Message, request: Request) -> Send:
        tag = self.state.tags.next()
        self.state.outstanding[(to, tag)] = request
        return Send(to, tag, message)

    def _offer(self, to: PeerId, block: SignatureBlock) -> Send:
        doc_id = block.doc_ref.id
        self.state.offer_history.setdefault(doc_id, set()).add(to)
        self.state.offered_docs.setdefault(to, set()).add(doc_id)
        return Send(to, self.state.tags.next(), Ihave(block.doc_ref, block))

    def _eligible(self) -> List[PeerId]:
        st = self.state
        return [p for p in st.peerlist.group() if p != st.self_id and p not in st.blacklist]

    def _is_admin(self) -> bool:
        return self.state.peerlist.role_of(self.state.self_id) == Role.ADMIN

    def _author_ok(self, path: str, originator: Optional[PeerId]) -> bool:
        if originator is None:
            return False
        if path == PEERLIST_PATH and self.state.peerlist.role_of(originator) != Role.ADMIN:
            logger.info(f"Dropping peerlist update originated by non-admin {originator.short()}")
            return False
        if not self.state.peerlist.authorized_author(path, originator):
            logger.info(f"Dropping {path}: {originator.short()} is not an authorized author")
            return False
        return True

    def _observe(self, block: SignatureBlock):
        for signer in block.signers:
            self.state.signed_seen.setdefault(signer, set()).add(block.doc_ref.id)

    def _note_version(self, ref: DocRef):
        known = self.state.known_versions
        known[ref.path] = max(known.get(ref.path, 0), ref.version)

    def _mark_seen(self, ref: DocRef, key: bytes):
        self.state.seen_offers.setdefault(ref, {}).setdefault(key, 1)

    def _mark_suspect(self, peer: PeerId, error):
        self.state.suspect_failures[peer] += 1
        logger.info(f"Peer {self.peerlist.label(peer)} served bad data: {describe(error) if isinstance(error, BaseException) else error}")

    def _count_replay(self, count: int, ref: DocRef, peer: PeerId):
        threshold = self.state.config.replay_factor * max(1, len(self.state.peerlist.group()))
        if count == threshold:
            self.state.stats['replay_trips'] += 1
            logger.warning(f"Offer for {ref.id} replayed {count} times (last from {self.peerlist.label(peer)})")

    def _record_acceptance(self, originator: PeerId, now: float):
        self.state.acceptances.setdefault(originator, []).append(now)

    # --- blacklisting -------------------------------------------------------

    def blacklist(self, peer: PeerId, reason: str, now: float,
                  evidence: Optional[ConflictEvidence] = None) -> List[Action]:
        st = self.state
        if peer == st.self_id or peer in st.blacklist:
            return []
        st.blacklist[peer] = BlacklistEntry(reason, now, evidence)
        logger.warning(f"Blacklisted {st.peerlist.label(peer)}: {reason}")
        for doc_id in sorted(st.pending):
            stored = st.store.lookup(doc_id)
            if stored is not None and stored.block.originator == peer:
                del st.pending[doc_id]
        self._persist_blacklist()
        return [PeerBlacklisted(peer, reason)]

    def _reject_block(self, from_peer: PeerId, block: SignatureBlock, error: DdnfsError,
                      now: float) -> List[Action]:
        self.state.stats['verify_failures'] += 1
        if isinstance(error, (UnknownSigner, LengthMismatch)) or from_peer not in block.signers:
            logger.info(f"Rejected offer from {self.peerlist.label(from_peer)}: {describe(error)}")
            return []
        return self.blacklist(from_peer, f"forwarded invalid block ({describe(error)})", now)

    # --- conflicts ----------------------------------------------------------

    def _check_conflict(self, ref: DocRef, block: SignatureBlock, now: float) -> Optional[List[Action]]:
        """None when no other content is known for this (path, version)"""
        st = self.state
        others = []
        local = st.store.lookup(ref.id)
        if local is not None and local.ref.content_digest != ref.content_digest:
            others.append(local.block)
        for digest_, cached in sorted(st.offers.get(ref.id, {}).items()):
            if digest_ != ref.content_digest:
                others.append(cached)
        if not others:
            return None
        other = others[0]
        if other.originator != block.originator:
            logger.info(f"Parking {ref}: {ref.id} already claimed by {st.peerlist.label(other.originator)}")
            return []
        return self._equivocation(other, block, now)

    def _equivocation(self, a: SignatureBlock, b: SignatureBlock, now: float) -> List[Action]:
        st = self.state
        evidence = ConflictEvidence.from_blocks(a, b)
        originator = evidence.originator
        st.stats['conflicts'] += 1
        actions = self.blacklist(originator, f"equivocation on {a.doc_ref.id}", now, evidence)

        marker = (originator, a.doc_ref.id)
        if marker in st.evidence_pushed:
            return actions
        st.evidence_pushed.add(marker)
        recipients = (set(a.signers) | set(b.signers) | set(st.peerlist.group())) - {st.self_id}
        for peer in sorted(recipients):
            if peer in st.blacklist or st.peerlist.role_of(peer) != Role.PEER:
                continue
            actions.append(self._offer(peer, a))
            actions.append(self._offer(peer, b))
        return actions

    # --- offers -------------------------------------------------------------

    def handle_ihave(self, from_peer: PeerId, msg: Ihave, now: float) -> List[Action]:
        st = self.state
        ref, block = msg.doc_ref, msg.block
        if from_peer in st.blacklist:
            return []

        key = block.digest()
        seen = st.seen_offers.get(ref)
        if seen is not None and key in seen:
            seen[key] += 1
            st.stats['duplicates'] += 1
            self._count_replay(seen[key], ref, from_peer)
            return self._reflexive(from_peer, ref, block)

        if from_peer not in st.peerlist.peers:
            logger.info(f"Ignoring offer from unknown peer {from_peer.short()}")
            return []
        try:
            verify_block(ref, block, st.peerlist.directory())
        except DdnfsError as e:
            return self._reject_block(from_peer, block, e, now)
        self._observe(block)

        originator = block.originator
        if originator in st.blacklist:
            return []
        if not self._author_ok(ref.path, originator):
            return []

        conflict = self._check_conflict(ref, block, now)
        if conflict is not None:
            return conflict

        local = st.store.lookup(ref.id)
        if local is None:
            cached = st.offers.setdefault(ref.id, {})
            known = cached.get(ref.content_digest)
            try:
                cached[ref.content_digest] = merge_blocks(known, block)[0] if known else block
            except ConflictingRecord as e:
                return self.blacklist(e.signer, "conflicting signature records", now)

        if from_peer not in block:
            st.stats['rejected'] += 1
            logger.info(f"Rejected offer for {ref.id}: sender {st.peerlist.label(from_peer)} has not signed it")
            return []

        self._note_version(ref)
        if local is not None:
            return self._merge_offer(from_peer, local, block, key, now)
        return self._start_acquisition(from_peer, ref, block, key, now)

    def _reflexive(self, from_peer: PeerId, ref: DocRef, block: SignatureBlock) -> List[Action]:
        local = self.state.store.lookup(ref.id)
        if local is None or local.ref != ref or from_peer == self.state.self_id:
            return []
        if local.block.signers - block.signers:
            return [self._offer(from_peer, local.block)]
        return []

    def _merge_offer(self, from_peer: PeerId, local: StoredDocument, block: SignatureBlock,
                     key: bytes, now: float) -> List[Action]:
        st = self.state
        try:
            merged, newly = merge_blocks(local.block, block)
        except ConflictingRecord as e:
            return self.blacklist(e.signer, "conflicting signature records", now)
        self._mark_seen(block.doc_ref, key)

        actions: List[Action] = []
        if newly:
            st.store.update_block(local.id, merged)
            actions.extend(self.check_activeness(local.id, now))
            stored = st.store.lookup(local.id)
            campaign = st.pending.get(local.id)
            if stored.status == DocumentStatus.PENDING and (campaign is None or campaign.exhausted):
                for target in self.select_offer_targets(merged.doc_ref, merged, st.config.fanout,
                                                        exclude={from_peer}):
                    actions.append(self._offer(target, merged))
        if merged.signers - block.signers and from_peer != st.self_id:
            actions.append(self._offer(from_peer, merged))
        return actions

    def _start_acquisition(self, from_peer: PeerId, ref: DocRef, block: SignatureBlock,
                           key: bytes, now: float) -> List[Action]:
        st = self.state
        acquisition = st.acquisitions.get(ref)
        if acquisition is not None:
            if from_peer not in acquisition.sources:
                acquisition.sources.append(from_peer)
            self._mark_seen(ref, key)
            return []
        originator = block.originator
        if originator != st.self_id and not self.rate_limit_check(originator, now):
            st.stats['deferred'] += 1
            logger.info(f"Deferring {ref.id}: rate limit for {st.peerlist.label(originator)}")
            return []
        self._mark_seen(ref, key)
        return self._acquire(ref, [from_peer], now)

    def _acquire(self, ref: DocRef, sources: List[PeerId], now: float, extra: bool = False) -> List[Action]:
        acquisition = Acquisition(ref, list(sources), extra=extra)
        self.state.acquisitions[ref] = acquisition
        return self._next_source(acquisition, now)

    def _next_source(self, acquisition: Acquisition, now: float) -> List[Action]:
        st = self.state
        ref = acquisition.doc_ref
        candidates = list(acquisition.sources)
        cached = st.offers.get(ref.id, {}).get(ref.content_digest)
        if cached is not None:
            candidates.extend(sorted(cached.signers))
        for peer in candidates:
            if peer in acquisition.tried or peer in st.blacklist:
                continue
            if peer not in st.peerlist.peers:
                continue
            acquisition.tried.add(peer)
            return [self._request(peer, Get(ref.path, ref.version),
                                  Request('acquire', now, doc_ref=ref))]
        logger.info(f"No source left for {ref.id}; waiting for new offers")
        del st.acquisitions[ref]
        st.seen_offers.pop(ref, None)
        return []

    # --- answers ------------------------------------------------------------

    def handle_getanswer(self, from_peer: PeerId, tag: str, answer: GetAnswer, now: float) -> List[Action]:
        request = self.state.outstanding.pop((from_peer, tag), None)
        if request is None:
            logger.debug(f"Unsolicited GETANSWER {tag} from {from_peer.short()}")
            return []
        if request.kind == 'fetch':
            return self._fetch_answer(request, from_peer, answer, now)
        if request.kind == 'acquire':
            return self._acquire_answer(request, from_peer, answer, now)
        return []

    def _check_answer(self, answer: GetAnswer) -> Document:
        document = make_document(answer.doc_ref.path, answer.doc_ref.version, answer.body)
        if document.ref != answer.doc_ref:
            raise DigestMismatch(f"body of {document.id} does not match the announced digest")
        verify_block(document, answer.block, self.state.peerlist.directory())
        return document

    def _acquire_answer(self, request: Request, from_peer: PeerId, answer: GetAnswer,
                        now: float) -> List[Action]:
        st = self.state
        ref = request.doc_ref
        acquisition = st.acquisitions.get(ref)
        if acquisition is None:
            return []
        if answer.status != 'ok':
            return self._next_source(acquisition, now)
        try:
            document = self._check_answer(answer)
        except (DdnfsError, ValueError) as e:
            st.stats['verify_failures'] += 1
            self._mark_suspect(from_peer, e)
            return self._next_source(acquisition, now)

        block = answer.block
        self._observe(block)
        if document.ref != ref:
            self._mark_suspect(from_peer, f"served {document.ref} instead of {ref}")
            actions = self._check_conflict(document.ref, block, now) or []
            if block.originator in st.blacklist:
                st.acquisitions.pop(ref, None)
                return actions
            return actions + self._next_source(acquisition, now)

        del st.acquisitions[ref]
        originator = block.originator
        if originator in st.blacklist or not self._author_ok(ref.path, originator):
            return []
        conflict = self._check_conflict(ref, block, now)
        if conflict is not None:
            return conflict

        for cached in st.offers.pop(ref.id, {}).values():
            if cached.doc_ref == ref:
                try:
                    block = merge_blocks(block, cached)[0]
                except ConflictingRecord as e:
                    return self.blacklist(e.signer, "conflicting signature records", now)

        if ref.path == PEERLIST_PATH:
            try:
                validate_peerlist_update(st.peerlist, document, block)
            except DdnfsError as e:
                logger.warning(f"Rejected peerlist {ref.id}: {describe(e)}")
                return []

        if st.self_id not in block and not self._is_admin():
            parent = from_peer if from_peer in block else originator
            block = block.with_record(sign_document(st.keypair, ref, block, parent=parent,
                                                    role=st.self_id.role))
            st.stats['signatures_created'] += 1

        try:
            st.store.put(StoredDocument(document, block, DocumentStatus.PENDING, now, from_peer), now)
        except StoreFull as e:
            logger.warning(f"Dropping {ref.id}: {e}")
            return []
        self._record_acceptance(originator, now)
        logger.info(f"Accepted {ref.id} from {st.peerlist.label(from_peer)} ({len(block)} signatures)")

        actions: List[Action] = [StatusChanged(ref.id, None, DocumentStatus.PENDING)]
        actions.extend(self.check_activeness(ref.id, now))
        actions.extend(self._start_campaign(ref, st.config.fanout, now, exclude={from_peer},
                                            extra=acquisition.extra))
        return actions

    # --- campaigns ----------------------------------------------------------

    def select_offer_targets(self, doc_ref: DocRef, block: SignatureBlock, k: int,
                             exclude: Iterable[PeerId] = ()) -> List[PeerId]:
        """
        Up to k peers: unsigned and never offered first, then unsigned, then
        signed.  Self, blacklisted peers, administrators and exclude are
        never chosen.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        excluded = set(exclude)
        eligible = [p for p in self._eligible() if p not in excluded]
        history = self.state.offer_history.get(doc_ref.id, set())
        signed = block.signers
        tiers = (
            [p for p in eligible if p not in signed and p not in history],
            [p for p in eligible if p not in signed and p in history],
            [p for p in eligible if p in signed],
        )
        chosen: List[PeerId] = []
        for tier in tiers:
            self.state.rng.shuffle(tier)
            chosen.extend(tier[:k - len(chosen)])
            if len(chosen) >= k:
                break
        return chosen

    def _start_campaign(self, ref: DocRef, fanout: int, now: float,
                        exclude: Iterable[PeerId] = (), extra: bool = False) -> List[Action]:
        st = self.state
        stored = st.store.lookup(ref.id)
        if stored is None:
            return []
        if stored.status != DocumentStatus.PENDING and not extra:
            return []
        campaign = OfferCampaign(ref, fanout, offered_to=set(exclude), next_due=now, extra=extra)
        st.pending[ref.id] = campaign
        actions = self._campaign_round(campaign, now)
        campaign.fanout = st.config.fanout
        return actions

    def _campaign_round(self, campaign: OfferCampaign, now: float) -> List[Action]:
        st = self.state
        doc_id = campaign.doc_ref.id
        stored = st.store.lookup(doc_id)
        if (stored is None or stored.block.originator in st.blacklist
                or (stored.status != DocumentStatus.PENDING and not campaign.extra)):
            st.pending.pop(doc_id, None)
            return []

        eligible = self._eligible()
        targets = self.select_offer_targets(campaign.doc_ref, stored.block, campaign.fanout,
                                            exclude=campaign.offered_to)
        actions = [self._offer(target, stored.block) for target in targets]
        campaign.offered_to.update(targets)
        campaign.round += 1
        campaign.next_due = now + st.config.round_interval
        if all(p in campaign.offered_to for p in eligible):
            self._exhaust(campaign, stored, now)
        return actions

    def _exhaust(self, campaign: OfferCampaign, stored: StoredDocument, now: float):
        st = self.state
        if stored.status != DocumentStatus.PENDING:
            st.pending.pop(stored.id, None)
            return
        campaign.exhausted = True
        campaign.extra = False
        campaign.next_due = now + st.config.round_interval * st.config.probe_rounds

    def _probe(self, campaign: OfferCampaign, now: float) -> List[Action]:
        st = self.state
        stored = st.store.lookup(campaign.doc_ref.id)
        if (stored is None or stored.status != DocumentStatus.PENDING
                or stored.block.originator in st.blacklist):
            st.pending.pop(campaign.doc_ref.id, None)
            return []
        campaign.next_due = now + st.config.round_interval * st.config.probe_rounds
        eligible = self._eligible()
        if not eligible:
            return []
        st.stats['probes'] += 1
        return [self._offer(st.rng.choice(eligible), stored.block)]

    # --- activeness ---------------------------------------------------------

    def check_activeness(self, doc_id: DocumentId, now: float) -> List[Action]:
        st = self.state
        stored = st.store.lookup(doc_id)
        if stored is None or stored.status != DocumentStatus.PENDING:
            return []
        if stored.block.originator in st.blacklist:
            return []
        if not st.peerlist.is_active(doc_id.path, stored.block):
            return []

        active = st.store.active_version(doc_id.path)
        if active is not None and active > doc_id.version:
            old, new = st.store.set_status(doc_id, DocumentStatus.SUPERSEDED, now)
            st.pending.pop(doc_id, None)
            return [StatusChanged(doc_id, old, new)]

        actions: List[Action] = []
        for changed, old, new in st.store.activate(doc_id, now):
            actions.append(StatusChanged(changed, old, new))
            campaign = st.pending.get(changed)
            if campaign is not None and not campaign.extra:
                del st.pending[changed]
        logger.info(f"{doc_id} is now active ({len(stored.block)} signatures)")

        if doc_id.path == PEERLIST_PATH:
            actions.extend(self._swap_peerlist(stored, now))
        return actions

    def _swap_peerlist(self, stored: StoredDocument, now: float) -> List[Action]:
        st = self.state
        if stored.id.version <= st.peerlist.version:
            return []
        try:
            candidate = parse_peerlist(stored.document.content, stored.id.version)
        except DdnfsError as e:
            logger.error(f"Active peerlist {stored.id} does not parse: {describe(e)}")
            return []
        old_version = st.peerlist.version
        self._install_peerlist(candidate)
        logger.info(f"Switched to peerlist v{candidate.version} ({len(candidate.peers)} members)")
        actions: List[Action] = [PeerlistChanged(old_version, candidate.version)]
        for sd in list(st.store.documents()):
            if sd.status == DocumentStatus.PENDING:
                actions.extend(self.check_activeness(sd.id, now))
        return actions

    # --- local commands -----------------------------------------------------

    def inject_document(self, path: str, content: bytes, now: float, version: Optional[int] = None,
                        targets: Optional[Sequence[PeerId]] = None) -> Tuple[DocumentId, List[Action]]:
        """Originate a document: sign it, store it Pending and start its offer campaign"""
        st = self.state
        if path != PEERLIST_PATH and not st.peerlist.authorized_author(path, st.self_id):
            raise NotAuthorized(f"{st.peerlist.label(st.self_id)} may not author {path}")
        if version is None:
            version = max(st.store.highest_version(path), st.known_versions.get(path, 0)) + 1

        document = make_document(path, version, content)
        record = sign_document(st.keypair, document.ref, role=st.self_id.role)
        block = SignatureBlock(document.ref, (record,))
        if path == PEERLIST_PATH:
            validate_peerlist_update(st.peerlist, document, block)

        st.store.put(StoredDocument(document, block, DocumentStatus.PENDING, now, st.self_id), now)
        st.stats['signatures_created'] += 1
        self._note_version(document.ref)
        logger.info(f"Injected {document.id} ({document.size} bytes)")

        actions: List[Action] = [StatusChanged(document.id, None, DocumentStatus.PENDING)]
        actions.extend(self.check_activeness(document.id, now))
        if targets is not None:
            actions.extend(self._offer(t, block) for t in targets)
            campaign = OfferCampaign(document.ref, st.config.fanout, offered_to=set(targets),
                                     next_due=now + st.config.round_interval)
            if st.store.lookup(document.id).status == DocumentStatus.PENDING:
                st.pending[document.id] = campaign
        else:
            actions.extend(self._start_campaign(document.ref, st.config.initial_fanout, now))
        return document.id, actions

    def adopt(self, document: Document, block: SignatureBlock, now: float,
              origin: Optional[PeerId] = None) -> StoredDocument:
        """Store a verified document without signing it (administrators' working copy)"""
        verify_block(document, block, self.state.peerlist.directory())
        stored = self.state.store.lookup(document.id)
        if stored is not None and stored.ref == document.ref:
            merged, _ = merge_blocks(stored.block, block)
            return self.state.store.update_block(document.id, merged)
        return self.state.store.put(StoredDocument(document, block, DocumentStatus.PENDING, now, origin), now)

    def countersign(self, doc_id: DocumentId, now: float,
                    targets: Optional[Sequence[PeerId]] = None) -> List[Action]:
        """Add this administrator's record (chain: the originator) and offer the result"""
        st = self.state
        if not self._is_admin():
            raise NotAdmin(f"{st.peerlist.label(st.self_id)} is not an administrator")
        stored = st.store.lookup(doc_id)
        if stored is None:
            raise NotFound(f"{doc_id} not stored")
        if st.self_id in stored.block:
            raise AlreadySigned(st.self_id)
        record = sign_document(st.keypair, stored.ref, stored.block,
                               parent=stored.block.originator, role=Role.ADMIN)
        block = stored.block.with_record(record)
        st.store.update_block(doc_id, block)
        st.stats['signatures_created'] += 1
        logger.info(f"Countersigned {doc_id} as administrator")

        actions = self.check_activeness(doc_id, now)
        if targets is None:
            targets = self.select_offer_targets(stored.ref, block, st.config.fanout)
        actions.extend(self._offer(t, block) for t in targets)
        return actions

    def rate_limit_check(self, originator: PeerId, now: float) -> bool:
        """Token bucket per originator; True allows one more new document"""
        st = self.state
        bucket = st.buckets.get(originator)
        if bucket is None:
            bucket = TokenBucket(st.config.rate_capacity, st.config.rate_refill_per_min,
                                 float(st.config.rate_capacity), now)
            st.buckets[originator] = bucket
        return bucket.take(now)

    # --- requests served ----------------------------------------------------

    def handle_get(self, from_peer: PeerId, tag: str, msg: Get, now: float) -> List[Action]:
        st = self.state
        if from_peer in st.blacklist:
            return []
        if from_peer not in st.peerlist.peers:
            return [Send(from_peer, tag, GetAnswer('denied'))]
        try:
            stored = st.store.get(msg.path, msg.version_sel)
        except NotFound:
            return [Send(from_peer, tag, GetAnswer('notfound'))]
        if stored.block.originator in st.blacklist:
            return [Send(from_peer, tag, GetAnswer('notfound'))]
        return [Send(from_peer, tag, GetAnswer('ok', stored.ref, stored.block, stored.document.content))]

    def handle_head(self, from_peer: PeerId, tag: str, msg: Head, now: float) -> List[Action]:
        st = self.state
        if from_peer in st.blacklist:
            return []
        if from_peer not in st.peerlist.peers:
            return [Send(from_peer, tag, HeadAnswer('denied'))]
        entries, truncated = st.store.list(msg.pattern, msg.version_sel, st.config.head_cap)
        entries = [(ref, block) for ref, block in entries if block.originator not in st.blacklist]
        return [Send(from_peer, tag, HeadAnswer('truncated' if truncated else 'ok', tuple(entries)))]

    def handle_message(self, from_peer: PeerId, tag: str, message: Message, now: float) -> List[Action]:
        """Route one decoded frame to its handler"""
        if isinstance(message, Ihave):
            return self.handle_ihave(from_peer, message, now)
        if isinstance(message, Get):
            return self.handle_get(from_peer, tag, message, now)
        if isinstance(message, GetAnswer):
            return self.handle_getanswer(from_peer, tag, message, now)
        if isinstance(message, Head):
            return self.handle_head(from_peer, tag, message, now)
        if isinstance(message, HeadAnswer):
            return self.handle_headanswer(from_peer, tag, message, now)
        raise TypeError(f"not a protocol message: {message!r}")

    # --- redundant reads ----------------------------------------------------

    def _fetch_candidates(self, path: str) -> List[PeerId]:
        st = self.state
        signers: Set[PeerId] = set()
        for version in st.store.versions(path):
            signers |= st.store.lookup(DocumentId(path, version)).block.signers
        eligible = self._eligible()
        first = [p for p in eligible if p in signers]
        rest = [p for p in eligible if p not in signers]
        st.rng.shuffle(first)
        st.rng.shuffle(rest)
        return first + rest

    def fetch_redundant(self, path: str, version_sel: VersionSel, tolerated: int, now: float,
                        candidates: Optional[Sequence[PeerId]] = None) -> Tuple[int, List[Action]]:
        """
        Ask tolerated+1 distinct peers for a document.  The FetchCompleted
        action carries the newest verified answer once all have replied or
        timed out.
        """
        if tolerated < 0:
            raise ValueError("tolerated rogues must be >= 0")
        st = self.state
        st.fetch_counter += 1
        fetch_id = st.fetch_counter
        pool = list(candidates) if candidates is not None else self._fetch_candidates(path)
        chosen = pool[:tolerated + 1]
        if not chosen:
            return fetch_id, [FetchCompleted(fetch_id, None, None, AllFailed(f"no peer to ask for {path}"))]
        if len(chosen) < tolerated + 1:
            logger.warning(f"Fetch of {path} asks {len(chosen)} peers; tolerating {tolerated} rogues "
                           f"needs {tolerated + 1}")
        st.fetches[fetch_id] = FetchState(fetch_id, path, version_sel, tolerated, set(chosen))
        actions = [self._request(peer, Get(path, version_sel), Request('fetch', now, fetch_id=fetch_id))
                   for peer in chosen]
        return fetch_id, actions

    def _fetch_answer(self, request: Request, from_peer: PeerId, answer: GetAnswer,
                      now: float) -> List[Action]:
        st = self.state
        fetch = st.fetches.get(request.fetch_id)
        if fetch is None:
            return []
        fetch.waiting.discard(from_peer)
        if answer.status != 'ok':
            fetch.failed[from_peer] = answer.status
        else:
            try:
                document = self._check_answer(answer)
                if document.path != fetch.path:
                    raise DigestMismatch(f"asked for {fetch.path}, got {document.path}")
                if isinstance(fetch.version_sel, int) and document.version != fetch.version_sel:
                    raise DigestMismatch(f"asked for version {fetch.version_sel}, got {document.version}")
                if not self._author_ok(document.path, answer.block.originator):
                    raise NotAuthorized(f"{document.id} has an unauthorized originator")
                if (fetch.version_sel == Selector.ACTIVE
                        and not st.peerlist.is_active(document.path, answer.block)):
                    raise DigestMismatch(f"{document.id} served as active but fails policy")
                fetch.answers.append((from_peer, document, answer.block))
            except (DdnfsError, ValueError) as e:
                fetch.failed[from_peer] = describe(e)
                self._mark_suspect(from_peer, e)
        if fetch.waiting:
            return []
        return self._complete_fetch(fetch, now)

    def _complete_fetch(self, fetch: FetchState, now: float) -> List[Action]:
        st = self.state
        del st.fetches[fetch.fetch_id]
        if not fetch.answers:
            reasons = ', '.join(f"{st.peerlist.label(p)}: {r}" for p, r in sorted(fetch.failed.items()))
            return [FetchCompleted(fetch.fetch_id, None, None, AllFailed(f"{fetch.path}: {reasons or 'no answers'}"))]

        variants: Dict[DocumentId, Dict[bytes, List[Tuple[Document, SignatureBlock]]]] = {}
        for _, document, block in fetch.answers:
            variants.setdefault(document.id, {}).setdefault(document.content_digest, []).append((document, block))

        actions: List[Action] = []
        inconsistent = None
        for doc_id, by_digest in sorted(variants.items()):
            if len(by_digest) > 1:
                a, b = [entries[0][1] for _, entries in sorted(by_digest.items())][:2]
                inconsistent = doc_id
                if a.originator == b.originator:
                    actions.extend(self._equivocation(a, b, now))
        if inconsistent is not None:
            actions.append(FetchCompleted(fetch.fetch_id, None, None,
                                          Inconsistent(f"conflicting content served for {inconsistent}")))
            return actions

        newest = max(variants)
        (entries,) = variants[newest].values()
        document, block = entries[0]
        for _, other in entries[1:]:
            try:
                block = merge_blocks(block, other)[0]
            except ConflictingRecord as e:
                actions.extend(self.blacklist(e.signer, "conflicting signature records", now))
        actions.append(FetchCompleted(fetch.fetch_id, document, block))
        return actions

    # --- catch-up -----------------------------------------------------------

    def head(self, peer: PeerId, pattern: str, version_sel: VersionSel, now: float) -> List[Action]:
        return [self._request(peer, Head(pattern, version_sel), Request('head', now, pattern=pattern))]

    def reconcile(self, helper: PeerId, now: float) -> List[Action]:
        """Wildcard HEAD against helper; unknown documents are fetched, gaps on either side repaired"""
        st = self.state
        if helper == st.self_id or helper not in st.peerlist.peers or helper in st.blacklist:
            raise HelperUnreachable(f"cannot reconcile with {st.peerlist.label(helper)}")
        state = ReconcileState(helper, now)
        st.reconciles[helper] = state
        logger.info(f"Reconciling with {st.peerlist.label(helper)}")
        return self._reconcile_query(state, '/**', now)

    def _reconcile_query(self, state: ReconcileState, pattern: str, now: float) -> List[Action]:
        state.queried.add(pattern)
        state.outstanding += 1
        return [self._request(state.helper, Head(pattern, Selector.ANY),
                              Request('head', now, pattern=pattern, reconcile=True))]

    def handle_headanswer(self, from_peer: PeerId, tag: str, answer: HeadAnswer, now: float) -> List[Action]:
        st = self.state
        request = st.outstanding.pop((from_peer, tag), None)
        if request is None or request.kind != 'head':
            return []
        entries = tuple((ref, block) for ref, block in answer.entries if self._usable_ref(from_peer, ref))
        for ref, _ in entries:
            self._note_version(ref)

        state = st.reconciles.get(from_peer) if request.reconcile else None
        if state is None:
            return [HeadCompleted(from_peer, request.pattern, answer.status, entries)]

        state.outstanding -= 1
        state.answered = True
        actions: List[Action] = []
        if answer.status == 'denied':
            state.error = HelperUnreachable(f"{st.peerlist.label(from_peer)} denied the listing")
        else:
            listed = set()
            for ref, block in entries:
                listed.add(ref.id)
                actions.extend(self._reconcile_entry(state, ref, block, now))
            if answer.status == 'ok':
                actions.extend(self._repair_helper(state, request.pattern, listed))
            else:
                actions.extend(self._split_query(state, request.pattern, entries, now))
        return actions + self._finish_reconcile(state)

    def _usable_ref(self, from_peer: PeerId, ref: DocRef) -> bool:
        try:
            ref.validate()
        except DdnfsError as e:
            self.state.stats['verify_failures'] += 1
            logger.info(f"Dropping listed entry from {self.peerlist.label(from_peer)}: {describe(e)}")
            return False
        return True

    def _reconcile_entry(self, state: ReconcileState, ref: DocRef, block: SignatureBlock,
                         now: float) -> List[Action]:
        st = self.state
        helper = state.helper
        try:
            verify_block(ref, block, st.peerlist.directory())
        except DdnfsError as e:
            st.stats['verify_failures'] += 1
            logger.info(f"Skipping listed {ref.id}: {describe(e)}")
            return []
        self._observe(block)
        originator = block.originator
        if originator in st.blacklist or not self._author_ok(ref.path, originator):
            return []
        conflict = self._check_conflict(ref, block, now)
        if conflict is not None:
            return conflict

        local = st.store.lookup(ref.id)
        if local is None:
            st.offers.setdefault(ref.id, {})[ref.content_digest] = block
            acquisition = st.acquisitions.get(ref)
            if acquisition is not None:
                if helper not in acquisition.sources:
                    acquisition.sources.append(helper)
                return []
            already_active = st.peerlist.is_active(ref.path, block)
            if originator != st.self_id and not already_active and not self.rate_limit_check(originator, now):
                st.stats['deferred'] += 1
                return []
            state.fetched += 1
            return self._acquire(ref, [helper], now, extra=True)

        try:
            merged, newly = merge_blocks(local.block, block)
        except ConflictingRecord as e:
            return self.blacklist(e.signer, "conflicting signature records", now)
        actions: List[Action] = []
        if st.self_id not in merged and not self._is_admin():
            parent = helper if helper in merged else originator
            merged = merged.with_record(sign_document(st.keypair, ref, merged, parent=parent,
                                                      role=st.self_id.role))
            st.stats['signatures_created'] += 1
            newly = True
            st.store.update_block(local.id, merged)
            actions.extend(self._start_campaign(ref, st.config.fanout, now, extra=True))
        elif newly:
            st.store.update_block(local.id, merged)
        if newly:
            actions.extend(self.check_activeness(local.id, now))
        if merged.signers - block.signers:
            actions.append(self._offer(helper, merged))
            state.offered += 1
        return actions

    def _repair_helper(self, state: ReconcileState, pattern: str, listed: Set[DocumentId]) -> List[Action]:
        """Offer the helper our documents its listing lacked"""
        st = self.state
        if st.peerlist.role_of(state.helper) != Role.PEER:
            return []
        actions: List[Action] = []
        for stored in st.store.documents():
            if stored.id in listed or stored.status == DocumentStatus.SUPERSEDED:
                continue
            if stored.block.originator in st.blacklist or not path_match(pattern, stored.id.path):
                continue
            actions.append(self._offer(state.helper, stored.block))
            state.offered += 1
        return actions

    def _split_query(self, state: ReconcileState, pattern: str,
                     entries: Sequence[Tuple[DocRef, SignatureBlock]], now: float) -> List[Action]:
        """A truncated '**' listing is re-asked one level down"""
        if not pattern.endswith('/**'):
            logger.warning(f"Listing of {pattern} truncated; not subdividing")
            return []
        prefix = pattern[:-3]
        patterns = {f"{prefix}/*"}
        for ref, _ in entries:
            rest = ref.path[len(prefix) + 1:].split('/')
            if len(rest) > 1:
                patterns.add(f"{prefix}/{rest[0]}/**")
        actions: List[Action] = []
        for sub in sorted(patterns - state.queried):
            actions.extend(self._reconcile_query(state, sub, now))
        return actions

    def _finish_reconcile(self, state: ReconcileState) -> List[Action]:
        if state.outstanding > 0:
            return []
        self.state.reconciles.pop(state.helper, None)
        logger.info(f"Reconcile with {self.peerlist.label(state.helper)} done: "
                    f"{state.fetched} fetched, {state.offered} offered")
        return [ReconcileCompleted(state.helper, state.fetched, state.offered, state.error)]

    # --- timers -------------------------------------------------------------

    def tick(self, now: float) -> List[Action]:
        """Expire requests, run due campaign rounds and probes"""
        st = self.state
        actions: List[Action] = []
        for key in sorted(st.outstanding):
            request = st.outstanding[key]
            if now - request.sent_at >= st.config.request_timeout:
                del st.outstanding[key]
                actions.extend(self._timeout(key[0], request, now))

        for doc_id in sorted(st.pending):
            campaign = st.pending.get(doc_id)
            if campaign is None or campaign.next_due > now:
                continue
            if campaign.exhausted:
                actions.extend(self._probe(campaign, now))
            else:
                actions.extend(self._campaign_round(campaign, now))
        return actions

    def _timeout(self, peer: PeerId, request: Request, now: float) -> List[Action]:
        st = self.state
        logger.debug(f"{request.kind} request to {peer.short()} timed out")
        if request.kind == 'acquire':
            acquisition = st.acquisitions.get(request.doc_ref)
            return self._next_source(acquisition, now) if acquisition else []
        if request.kind == 'fetch':
            fetch = st.fetches.get(request.fetch_id)
            if fetch is None:
                return []
            fetch.waiting.discard(peer)
            fetch.failed[peer] = 'timeout'
            return [] if fetch.waiting else self._complete_fetch(fetch, now)
        if request.reconcile:
            state = st.reconciles.get(peer)
            if state is None:
                return []
            state.outstanding -= 1
            if not state.answered:
                state.error = HelperUnreachable(f"{st.peerlist.label(peer)} did not answer")
            return self._finish_reconcile(state)
        return [HeadCompleted(peer, request.pattern, 'timeout', ())]

    # --- inspection ---------------------------------------------------------

    def suspects(self) -> Dict[PeerId, str]:
        """Peers offered many documents without ever being seen signing one"""
        st = self.state
        flagged = {}
        for peer, docs in sorted(st.offered_docs.items()):
            if peer in st.blacklist:
                continue
            if len(docs) >= st.config.suspect_threshold and not st.signed_seen.get(peer):
                flagged[peer] = f"offered {len(docs)} documents, no signature seen"
        for peer, failures in sorted(st.suspect_failures.items()):
            if peer not in flagged and peer not in st.blacklist:
                flagged[peer] = f"served {failures} bad answers"
        return flagged

    def is_idle(self) -> bool:
        """No outstanding request and no campaign still making rounds"""
        st = self.state
        return not st.outstanding and all(c.exhausted for c in st.pending.values())

    def summary(self) -> dict:
        st = self.state
        counts = Counter(sd.status.value for sd in st.store.documents())
        return {
            'peer': st.self_id.hex,
            'peerlist_version': st.peerlist.version,
            'documents': dict(counts),
            'campaigns': len(st.pending),
            'outstanding': len(st.outstanding),
            'blacklisted': {p.hex: e.reason for p, e in st.blacklist.items()},
            'suspects': {p.hex: r for p, r in self.suspects().items()},
            'stats': dict(st.stats),
        }
