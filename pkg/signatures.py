"""
Hierarchical overlapping signatures.

Every peer signs a document once, on first reception.  Its signature covers
the document reference and the signature bytes of every ancestor on the
distribution chain it first observed (originator first, immediate parent
last).  Blocks of such records merge without anyone signing again.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from documents import DocRef, Document
from errors import (AlreadySigned, BadSignature, ConflictingRecord, DigestMismatch,
                    DocRefMismatch, LengthMismatch, MissingChainRecord, MultipleOriginators,
                    ParentUnknown, UnknownSigner, BodyLengthMismatch, MalformedKey,
                    MalformedSignature)
from identity import KeyPair, PeerId, Role, sign, verify

logger = logging.getLogger(__name__)

_FP = 32


@dataclass(frozen=True)
class SignatureRecord:
    signer: PeerId
    chain: Tuple[PeerId, ...]
    sig: bytes

    def __post_init__(self):
        object.__setattr__(self, 'chain', tuple(self.chain))
        if self.signer in self.chain:
            raise ValueError(f"signer {self.signer} appears in its own chain")
        if len(set(self.chain)) != len(self.chain):
            raise ValueError("chain entries must be distinct")

    @property
    def is_originator(self) -> bool:
        return not self.chain

    def describe(self) -> str:
        path = ' -> '.join(p.short() for p in self.chain + (self.signer,))
        return path


@dataclass(frozen=True)
class SignatureBlock:
    """All known records for one document, at most one per signer"""
    doc_ref: DocRef
    records: Tuple[SignatureRecord, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.records, key=lambda r: r.signer.fingerprint))
        signers = [r.signer for r in ordered]
        if len(set(signers)) != len(signers):
            raise ValueError("a signature block holds at most one record per signer")
        object.__setattr__(self, 'records', ordered)

    def __len__(self):
        return len(self.records)

    @property
    def signers(self) -> FrozenSet[PeerId]:
        return frozenset(r.signer for r in self.records)

    def by_signer(self) -> Dict[PeerId, SignatureRecord]:
        return {r.signer: r for r in self.records}

    def get(self, signer: PeerId) -> Optional[SignatureRecord]:
        for record in self.records:
            if record.signer == signer:
                return record
        return None

    def __contains__(self, signer: PeerId) -> bool:
        return self.get(signer) is not None

    @property
    def originator(self) -> Optional[PeerId]:
        for record in self.records:
            if record.is_originator:
                return record.signer
        return None

    def originator_record(self) -> Optional[SignatureRecord]:
        for record in self.records:
            if record.is_originator:
                return record
        return None

    def referenced(self) -> Set[PeerId]:
        """Signers named in somebody's chain (the non-leaf records)"""
        return {p for r in self.records for p in r.chain}

    def leaves(self) -> List[PeerId]:
        inner = self.referenced()
        return [r.signer for r in self.records if r.signer not in inner]

    def with_record(self, record: SignatureRecord) -> 'SignatureBlock':
        return SignatureBlock(self.doc_ref, self.records + (record,))

    def without(self, *signers: PeerId) -> 'SignatureBlock':
        drop = set(signers)
        return SignatureBlock(self.doc_ref, tuple(r for r in self.records if r.signer not in drop))

    def encode(self) -> bytes:
        return encode_block(self)

    def digest(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()


@dataclass(frozen=True)
class VerifiedBlock:
    block: SignatureBlock

    @property
    def signers(self) -> FrozenSet[PeerId]:
        return self.block.signers


def signing_payload(doc_ref: DocRef, chain: Sequence[PeerId], chain_sigs: Sequence[bytes]) -> bytes:
    """
    Canonical bytes a record signs: content digest, path, version, size and
    the ancestors' signatures in chain order.
    """
    if len(chain) != len(chain_sigs):
        raise LengthMismatch(f"{len(chain)} chain entries but {len(chain_sigs)} signatures")

    path = doc_ref.path.encode('utf-8')
    parts = [
        doc_ref.content_digest,
        struct.pack('>H', len(path)),
        path,
        struct.pack('>QQ', doc_ref.version, doc_ref.size),
        struct.pack('>H', len(chain_sigs)),
    ]
    for sig in chain_sigs:
        parts.append(struct.pack('>H', len(sig)))
        parts.append(sig)
    return b''.join(parts)


def _chain_sigs(block: SignatureBlock, chain: Sequence[PeerId]) -> List[bytes]:
    records = block.by_signer()
    sigs = []
    for ancestor in chain:
        record = records.get(ancestor)
        if record is None:
            raise MissingChainRecord(ancestor)
        sigs.append(record.sig)
    return sigs


def sign_document(kp: KeyPair, doc_ref: DocRef,
                  parent_block: Optional[SignatureBlock] = None,
                  parent: Optional[PeerId] = None,
                  role: Role = Role.PEER) -> SignatureRecord:
    """
    Create this key's one record for a document.  Without a parent the
    record is the originator's; otherwise the chain is the parent's chain
    followed by the parent itself.
    """
    signer = kp.peer_id(role)

    if parent_block is not None and signer in parent_block:
        raise AlreadySigned(signer)

    if parent is None:
        if parent_block is not None and len(parent_block):
            raise ParentUnknown("a parent is required once the document has signatures")
        chain: Tuple[PeerId, ...] = ()
        chain_sigs: List[bytes] = []
    else:
        if parent_block is None:
            raise ParentUnknown(f"no block given for parent {parent.short()}")
        parent_record = parent_block.get(parent)
        if parent_record is None:
            raise ParentUnknown(f"parent {parent.short()} has no record in the block")
        chain = parent_record.chain + (parent,)
        try:
            chain_sigs = _chain_sigs(parent_block, chain)
        except MissingChainRecord as e:
            raise ParentUnknown(f"incomplete chain for parent {parent.short()}: {e}")

    sig = sign(kp, signing_payload(doc_ref, chain, chain_sigs))
    return SignatureRecord(signer, chain, sig)


def verify_block(doc: Union[Document, DocRef], block: SignatureBlock,
                 directory: Mapping[PeerId, bytes]) -> VerifiedBlock:
    """Check closure, originator uniqueness and every signature of a block"""
    block.doc_ref.validate()
    if len(block.records) > len(directory):
        raise LengthMismatch(f"{len(block.records)} records but only {len(directory)} known signers")
    if isinstance(doc, Document):
        ref = block.doc_ref
        if (doc.id.path, doc.id.version) != (ref.path, ref.version):
            raise DigestMismatch(f"block is for {ref.path}@{ref.version}, not {doc.id}")
        if doc.size != ref.size or doc.content_digest != ref.content_digest:
            raise DigestMismatch(f"content of {doc.id} does not match the signed digest")
    elif doc != block.doc_ref:
        raise DigestMismatch(f"block reference {block.doc_ref} differs from {doc}")

    records = block.by_signer()

    # closure first: a record is only checkable with all its ancestors' bytes
    for record in block.records:
        for ancestor in record.chain:
            if ancestor not in records:
                raise MissingChainRecord(ancestor)

    originators = [r.signer for r in block.records if r.is_originator]
    if len(originators) != 1:
        raise MultipleOriginators(f"expected exactly one originator record, found {len(originators)}")
    originator = originators[0]

    for record in block.records:
        if record.signer not in directory:
            raise UnknownSigner(record.signer)
        if record.chain and record.chain[0] != originator:
            raise BadSignature(record.signer, "chain does not start at the originator")
        payload = signing_payload(block.doc_ref, record.chain,
                                  [records[p].sig for p in record.chain])
        try:
            ok = verify(directory[record.signer], payload, record.sig)
        except (MalformedKey, MalformedSignature):
            ok = False
        if not ok:
            raise BadSignature(record.signer)

    return VerifiedBlock(block)


def merge_blocks(a: SignatureBlock, b: SignatureBlock) -> Tuple[SignatureBlock, FrozenSet[PeerId]]:
    """Union of two verified blocks; a signer with two different records is an error"""
    if a.doc_ref != b.doc_ref:
        raise DocRefMismatch(f"{a.doc_ref} vs {b.doc_ref}")

    merged = a.by_signer()
    for record in b.records:
        known = merged.get(record.signer)
        if known is None:
            merged[record.signer] = record
        elif known != record:
            raise ConflictingRecord(record.signer, "signer holds two different records")

    newly_learned = b.signers - a.signers
    return SignatureBlock(a.doc_ref, tuple(merged.values())), newly_learned


def unsigned_peers(block: SignatureBlock, group: Iterable[PeerId]) -> Set[PeerId]:
    return set(group) - block.signers


def encode_block(block: SignatureBlock) -> bytes:
    """u32 count, then per record: signer fp, u16 chain len, chain fps, u16 sig len, sig"""
    parts = [struct.pack('>I', len(block.records))]
    for record in block.records:
        parts.append(record.signer.fingerprint)
        parts.append(struct.pack('>H', len(record.chain)))
        parts.extend(p.fingerprint for p in record.chain)
        parts.append(struct.pack('>H', len(record.sig)))
        parts.append(record.sig)
    return b''.join(parts)


def decode_block(doc_ref: DocRef, data: bytes,
                 roles: Optional[Mapping[PeerId, Role]] = None) -> SignatureBlock:
    """Inverse of encode_block; the byte count must match exactly"""
    roles = roles or {}

    def peer(fp: bytes) -> PeerId:
        pid = PeerId(fp)
        return PeerId(fp, roles.get(pid, Role.PEER))

    try:
        offset = 0
        (count,) = struct.unpack_from('>I', data, offset)
        offset += 4
        records = []
        for _ in range(count):
            signer = data[offset:offset + _FP]
            if len(signer) != _FP:
                raise BodyLengthMismatch("block truncated inside a signer fingerprint")
            offset += _FP
            (chain_len,) = struct.unpack_from('>H', data, offset)
            offset += 2
            chain = []
            for _ in range(chain_len):
                fp = data[offset:offset + _FP]
                if len(fp) != _FP:
                    raise BodyLengthMismatch("block truncated inside a chain")
                chain.append(peer(fp))
                offset += _FP
            (sig_len,) = struct.unpack_from('>H', data, offset)
            offset += 2
            sig = data[offset:offset + sig_len]
            if len(sig) != sig_len:
                raise BodyLengthMismatch("block truncated inside a signature")
            offset += sig_len
            records.append(SignatureRecord(peer(signer), tuple(chain), sig))
    except struct.error as e:
        raise BodyLengthMismatch(f"block truncated: {e}")
    except ValueError as e:
        raise BodyLengthMismatch(f"inconsistent block: {e}")

    if offset != len(data):
        raise BodyLengthMismatch(f"{len(data) - offset} trailing bytes after block")
    return SignatureBlock(doc_ref, tuple(records))
