"""
Simulated peer behaviours.  Each adversary wraps an otherwise honest
engine and deviates only at its message queues; none can forge signatures.
"""

import logging
from typing import Dict, List, Optional, Tuple

from documents import Document, DocumentId, make_document
from engine import Action, ReplicationEngine, Send
from errors import ConfigError
from identity import PeerId
from signatures import SignatureBlock, sign_document
from wire import Get, GetAnswer, Ihave, Message

logger = logging.getLogger(__name__)


class Behavior:
    """Honest peer: every hook defers to the engine"""
    name = 'honest'
    honest = True

    def __init__(self, engine: ReplicationEngine, label: str):
        self.engine = engine
        self.label = label

    def receive(self, from_peer: PeerId, tag: str, message: Message, now: float) -> List[Action]:
        return self.engine.handle_message(from_peer, tag, message, now)

    def outgoing(self, send: Send) -> Optional[Send]:
        return send

    def tick(self, now: float) -> List[Action]:
        return self.engine.tick(now)

    def on_round(self, round_no: int, now: float) -> List[Action]:
        return []

    def inject(self, path: str, content: bytes, now: float) -> List[Action]:
        _, actions = self.engine.inject_document(path, content, now)
        return actions


class SilentDrop(Behavior):
    """Accepts connections but never answers or forwards anything"""
    name = 'silentdrop'
    honest = False

    def receive(self, from_peer, tag, message, now):
        return []

    def outgoing(self, send):
        return None

    def tick(self, now):
        return []


class StaleServe(Behavior):
    """Answers GET for the newest or active version with the oldest one it holds"""
    name = 'staleserve'
    honest = False

    def receive(self, from_peer, tag, message, now):
        if isinstance(message, Get) and not isinstance(message.version_sel, int):
            store = self.engine.store
            versions = store.versions(message.path)
            if versions:
                stale = store.lookup(DocumentId(message.path, versions[0]))
                return [Send(from_peer, tag, GetAnswer('ok', stale.ref, stale.block, stale.document.content))]
        return super().receive(from_peer, tag, message, now)


class StripOffers(Behavior):
    """Removes every leaf record except the originator's and its own from offers"""
    name = 'stripoffers'
    honest = False

    def outgoing(self, send):
        if not isinstance(send.message, Ihave):
            return send
        block = send.message.block
        keep = {block.originator, self.engine.self_id}
        stripped = block.without(*[p for p in block.leaves() if p not in keep])
        return Send(send.to, send.tag, Ihave(stripped.doc_ref, stripped))


class Equivocate(Behavior):
    """
    Originates two different contents under one (path, version): half of
    the group is offered one, half the other.  GET answers follow the same
    split.
    """
    name = 'equivocate'
    honest = False

    def __init__(self, engine, label):
        super().__init__(engine, label)
        self.variants: Dict[DocumentId, Tuple[Tuple[Document, SignatureBlock], ...]] = {}
        self.assignment: Dict[Tuple[DocumentId, PeerId], int] = {}

    def inject(self, path, content, now):
        engine = self.engine
        version = max(engine.store.highest_version(path), engine.state.known_versions.get(path, 0)) + 1
        documents = (make_document(path, version, content),
                     make_document(path, version, content + b'\x00equivocated'))
        variants = tuple(
            (doc, SignatureBlock(doc.ref, (sign_document(engine.state.keypair, doc.ref),)))
            for doc in documents
        )
        doc_id = documents[0].id
        self.variants[doc_id] = variants
        engine.state.known_versions[path] = version

        group = [p for p in engine.peerlist.group() if p != engine.self_id]
        half = len(group) // 2
        actions: List[Action] = []
        for index, peer in enumerate(group):
            which = 0 if index < half else 1
            self.assignment[(doc_id, peer)] = which
            _, block = variants[which]
            actions.append(Send(peer, engine.state.tags.next(), Ihave(block.doc_ref, block)))
        logger.info(f"{self.label} equivocates on {doc_id}")
        return actions

    def receive(self, from_peer, tag, message, now):
        if isinstance(message, Get):
            for doc_id, variants in self.variants.items():
                if doc_id.path != message.path:
                    continue
                if isinstance(message.version_sel, int) and message.version_sel != doc_id.version:
                    continue
                doc, block = variants[self.assignment.get((doc_id, from_peer), 0)]
                return [Send(from_peer, tag, GetAnswer('ok', doc.ref, block, doc.content))]
        return super().receive(from_peer, tag, message, now)


class Flood(Behavior):
    """Injects a burst of valid documents every round"""
    name = 'flood'
    honest = False
    per_round = 100

    def on_round(self, round_no, now):
        actions: List[Action] = []
        for index in range(self.per_round):
            path = f"/flood/{self.label}/{round_no}/{index}"
            _, injected = self.engine.inject_document(path, f"{path} payload".encode('utf-8'), now)
            actions.extend(injected)
        return actions


BEHAVIORS = {cls.name: cls for cls in (Behavior, SilentDrop, StaleServe, StripOffers, Equivocate, Flood)}


def make_behavior(name: str, engine: ReplicationEngine, label: str) -> Behavior:
    try:
        cls = BEHAVIORS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown behaviour {name!r} (choose from {', '.join(sorted(BEHAVIORS))})")
    return cls(engine, label)
