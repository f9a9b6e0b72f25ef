"""
Durable local store of documents, signature blocks and status.

On disk every document path gets one directory (the percent-encoded path)
holding one content file per version, a sibling '.sig' file with the
canonical block bytes and a '.meta' JSON file.  Status transitions go to a
single append-only journal; a version only exists once its first journal
line has been written.
"""

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple
from urllib.parse import quote, unquote

from documents import (DocRef, Document, DocumentId, DocumentStatus, Selector, VersionSel,
                       check_transition, make_document, path_match, validate_pattern)
from errors import ConflictDetected, DocRefMismatch, NotFound, StoreFull, StoreIoError
from identity import PeerId
from signatures import SignatureBlock, decode_block, encode_block

# Try to import config, with fallbacks
try:
    from config import HEAD_CAP, MAX_DOCUMENTS
except ImportError:
    HEAD_CAP = 1000
    MAX_DOCUMENTS = 0

from memory_storage import MemoryStorage

logger = logging.getLogger(__name__)

JOURNAL_FILE = 'journal'
NO_STATUS = '-'


@dataclass
class StoredDocument:
    document: Document
    block: SignatureBlock
    status: DocumentStatus
    received_at: float
    origin: Optional[PeerId] = None

    def __post_init__(self):
        if self.block.doc_ref != self.document.ref:
            raise DocRefMismatch(f"block for {self.block.doc_ref} stored with {self.document.ref}")

    @property
    def id(self) -> DocumentId:
        return self.document.id

    @property
    def ref(self) -> DocRef:
        return self.document.ref


def journal_line(now: float, path: str, version: int, old: str, new: str) -> str:
    return f"{int(now * 1000)} {quote(path, safe='/')} {version} {old}→{new}"


def parse_journal_line(line: str) -> Optional[Tuple[str, int, str, str]]:
    """(path, version, old, new), or None for a torn or foreign line"""
    fields = line.strip().split(' ')
    if len(fields) != 4 or '→' not in fields[3]:
        return None
    if not fields[0].isdigit() or not fields[2].isdigit():
        return None
    old, new = fields[3].split('→', 1)
    return unquote(fields[1]), int(fields[2]), old, new


class DiskStorage:
    """File-per-version backend rooted at one directory"""

    def __init__(self, root: str):
        self.root = root
        self.docs_dir = os.path.join(root, 'docs')
        try:
            os.makedirs(self.docs_dir, exist_ok=True)
        except OSError as e:
            raise StoreIoError(f"cannot create store at {root}: {e}")

    def _dir(self, path: str) -> str:
        return os.path.join(self.docs_dir, quote(path, safe=''))

    def _file(self, path: str, version: int, suffix: str = '') -> str:
        return os.path.join(self._dir(path), f"{version}{suffix}")

    def _atomic_write(self, target: str, data: bytes):
        tmp = target + '.tmp'
        try:
            os.makedirs(os.path.dirname(target), exist_ok=True)
            with open(tmp, 'wb') as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, target)
        except OSError as e:
            raise StoreIoError(f"write {target} failed: {e}")

    def write_content(self, path: str, version: int, content: bytes):
        self._atomic_write(self._file(path, version), content)

    def write_block(self, path: str, version: int, block_bytes: bytes):
        self._atomic_write(self._file(path, version, '.sig'), block_bytes)

    def write_meta(self, path: str, version: int, meta: dict):
        self._atomic_write(self._file(path, version, '.meta'), json.dumps(meta, sort_keys=True).encode('utf-8'))

    def append_journal(self, line: str):
        try:
            with open(os.path.join(self.root, JOURNAL_FILE), 'a', encoding='utf-8') as f:
                f.write(line + '\n')
                f.flush()
                os.fsync(f.fileno())
        except OSError as e:
            raise StoreIoError(f"journal append failed: {e}")

    def read_journal(self) -> List[str]:
        journal = os.path.join(self.root, JOURNAL_FILE)
        if not os.path.exists(journal):
            return []
        with open(journal, 'r', encoding='utf-8', errors='replace') as f:
            return f.read().splitlines()

    def read_document(self, path: str, version: int) -> Optional[Tuple[bytes, Optional[bytes], dict]]:
        content_file = self._file(path, version)
        if not os.path.exists(content_file):
            return None
        try:
            with open(content_file, 'rb') as f:
                content = f.read()
            block_bytes = None
            if os.path.exists(content_file + '.sig'):
                with open(content_file + '.sig', 'rb') as f:
                    block_bytes = f.read()
            meta = {}
            if os.path.exists(content_file + '.meta'):
                with open(content_file + '.meta', 'rb') as f:
                    meta = json.loads(f.read().decode('utf-8') or '{}')
        except (OSError, ValueError) as e:
            raise StoreIoError(f"read {path}@{version} failed: {e}")
        return content, block_bytes, meta

    def list_stored(self) -> List[Tuple[str, int]]:
        stored = []
        for entry in sorted(os.listdir(self.docs_dir)):
            directory = os.path.join(self.docs_dir, entry)
            if not os.path.isdir(directory):
                continue
            for name in os.listdir(directory):
                if name.isdigit():
                    stored.append((unquote(entry), int(name)))
        return sorted(stored)

    def remove(self, path: str, version: int):
        for suffix in ('', '.sig', '.meta', '.tmp', '.sig.tmp', '.meta.tmp'):
            target = self._file(path, version, suffix)
            if os.path.exists(target):
                os.remove(target)
        directory = self._dir(path)
        if os.path.isdir(directory) and not os.listdir(directory):
            os.rmdir(directory)

    def save_json(self, name: str, data):
        self._atomic_write(os.path.join(self.root, f"{name}.json"),
                           json.dumps(data, indent=2, sort_keys=True).encode('utf-8'))

    def load_json(self, name: str, default=None):
        target = os.path.join(self.root, f"{name}.json")
        if not os.path.exists(target):
            return default
        try:
            with open(target, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (OSError, ValueError) as e:
            raise StoreIoError(f"cannot read {target}: {e}")


class DocumentDatabase:
    """Index of stored documents over a disk or in-memory backend"""

    def __init__(self, store_dir: Optional[str] = None, max_documents: int = None):
        self.store_dir = store_dir
        self.max_documents = MAX_DOCUMENTS if max_documents is None else max_documents
        self.backend = DiskStorage(store_dir) if store_dir else MemoryStorage()
        self._index: Dict[str, Dict[int, StoredDocument]] = {}
        self._lock = threading.RLock()
        self._load()

    # --- recovery -----------------------------------------------------------

    def _load(self):
        """Rebuild the index from the journal, dropping versions whose put never completed"""
        statuses: Dict[Tuple[str, int], str] = {}
        for line in self.backend.read_journal():
            parsed = parse_journal_line(line)
            if parsed is None:
                logger.warning(f"Ignoring unreadable journal line {line[:80]!r}")
                continue
            path, version, _, new = parsed
            statuses[(path, version)] = new

        for path, version in self.backend.list_stored():
            status = statuses.get((path, version))
            loaded = self.backend.read_document(path, version) if status not in (None, NO_STATUS) else None
            if loaded is None or loaded[1] is None:
                logger.warning(f"Discarding incomplete document {path}@{version}")
                self.backend.remove(path, version)
                continue
            content, block_bytes, meta = loaded
            try:
                document = make_document(path, version, content)
                block = decode_block(document.ref, block_bytes)
                origin = PeerId.from_hex(meta['origin']) if meta.get('origin') else None
                stored = StoredDocument(document, block, DocumentStatus(status),
                                        float(meta.get('received_at', 0.0)), origin)
            except Exception as e:
                logger.warning(f"Discarding unreadable document {path}@{version}: {e}")
                self.backend.remove(path, version)
                continue
            self._index.setdefault(path, {})[version] = stored

        if self._index:
            logger.info(f"Loaded {self.count()} documents from {self.store_dir or 'memory'}")

    # --- writes -------------------------------------------------------------

    def put(self, sd: StoredDocument, now: Optional[float] = None) -> StoredDocument:
        """
        Store a document.  A different digest under an existing id is a
        conflict; the same digest only replaces block and status.
        """
        now = time.time() if now is None else now
        path, version = sd.id.path, sd.id.version
        with self._lock:
            existing = self._index.get(path, {}).get(version)
            if existing is not None:
                if existing.document.content_digest != sd.document.content_digest:
                    raise ConflictDetected(f"{sd.id} already stored with a different digest", existing)
                if sd.status != existing.status:
                    check_transition(existing.status, sd.status)
                if sd.block != existing.block:
                    self.backend.write_block(path, version, encode_block(sd.block))
                if sd.status != existing.status:
                    self.backend.append_journal(journal_line(now, path, version,
                                                             existing.status.value, sd.status.value))
                existing.block = sd.block
                existing.status = sd.status
                return existing

            if self.max_documents and self.count() >= self.max_documents:
                raise StoreFull(f"store holds {self.count()} documents (limit {self.max_documents})")

            self.backend.write_content(path, version, sd.document.content)
            self.backend.write_block(path, version, encode_block(sd.block))
            self.backend.write_meta(path, version, {
                'received_at': sd.received_at,
                'origin': sd.origin.hex if sd.origin else None,
            })
            self.backend.append_journal(journal_line(now, path, version, NO_STATUS, sd.status.value))
            self._index.setdefault(path, {})[version] = sd
            logger.debug(f"Stored {sd.id} ({sd.status.value}, {len(sd.block)} signatures)")
            return sd

    def update_block(self, doc_id: DocumentId, block: SignatureBlock) -> StoredDocument:
        stored = self._require(doc_id)
        if block.doc_ref != stored.ref:
            raise DocRefMismatch(f"block for {block.doc_ref} does not belong to {doc_id}")
        with self._lock:
            self.backend.write_block(doc_id.path, doc_id.version, encode_block(block))
            stored.block = block
        return stored

    def set_status(self, doc_id: DocumentId, status: DocumentStatus,
                   now: Optional[float] = None) -> Optional[Tuple[DocumentStatus, DocumentStatus]]:
        """Apply one legal transition; returns (old, new) or None when unchanged"""
        now = time.time() if now is None else now
        with self._lock:
            stored = self._require(doc_id)
            old = stored.status
            if old == status:
                return None
            check_transition(old, status)
            self.backend.append_journal(journal_line(now, doc_id.path, doc_id.version, old.value, status.value))
            stored.status = status
            return old, status

    def activate(self, doc_id: DocumentId, now: Optional[float] = None
                 ) -> List[Tuple[DocumentId, DocumentStatus, DocumentStatus]]:
        """
        Make one version Active and every older version of its path
        Superseded.  Returns the transitions applied.
        """
        changes = []
        with self._lock:
            change = self.set_status(doc_id, DocumentStatus.ACTIVE, now)
            if change:
                changes.append((doc_id, *change))
            for version, stored in sorted(self._index.get(doc_id.path, {}).items()):
                if version >= doc_id.version or stored.status == DocumentStatus.SUPERSEDED:
                    continue
                change = self.set_status(stored.id, DocumentStatus.SUPERSEDED, now)
                if change:
                    changes.append((stored.id, *change))
        return changes

    def remove(self, doc_id: DocumentId, now: Optional[float] = None):
        now = time.time() if now is None else now
        with self._lock:
            stored = self._require(doc_id)
            self.backend.append_journal(journal_line(now, doc_id.path, doc_id.version,
                                                     stored.status.value, NO_STATUS))
            self.backend.remove(doc_id.path, doc_id.version)
            versions = self._index[doc_id.path]
            del versions[doc_id.version]
            if not versions:
                del self._index[doc_id.path]

    def gc_superseded(self, keep_last: int = 0, now: Optional[float] = None) -> int:
        """Per path, drop Superseded versions beyond the newest keep_last"""
        removed = 0
        for path in self.paths():
            superseded = sorted((v for v, sd in self._index.get(path, {}).items()
                                 if sd.status == DocumentStatus.SUPERSEDED), reverse=True)
            for version in superseded[keep_last:]:
                self.remove(DocumentId(path, version), now)
                removed += 1
        if removed:
            logger.info(f"Garbage-collected {removed} superseded versions")
        return removed

    # --- reads --------------------------------------------------------------

    def _require(self, doc_id: DocumentId) -> StoredDocument:
        stored = self._index.get(doc_id.path, {}).get(doc_id.version)
        if stored is None:
            raise NotFound(f"{doc_id} not stored")
        return stored

    def lookup(self, doc_id: DocumentId) -> Optional[StoredDocument]:
        return self._index.get(doc_id.path, {}).get(doc_id.version)

    def get(self, path: str, version_sel: VersionSel) -> StoredDocument:
        versions = self._index.get(path, {})
        if version_sel == Selector.ANY:
            if not versions:
                raise NotFound(f"{path} not stored")
            return versions[max(versions)]
        if version_sel == Selector.ACTIVE:
            active = [v for v, sd in versions.items() if sd.status == DocumentStatus.ACTIVE]
            if not active:
                raise NotFound(f"{path} has no active version")
            return versions[max(active)]
        if version_sel not in versions:
            raise NotFound(f"{path}@{version_sel} not stored")
        return versions[version_sel]

    def list(self, pattern: str, version_sel: VersionSel = Selector.ANY,
             cap: int = HEAD_CAP) -> Tuple[List[Tuple[DocRef, SignatureBlock]], bool]:
        """
        Matching (doc_ref, block) pairs in path then version order.  ANY
        lists every version, ACTIVE the active one per path.  The flag is
        True when the listing was cut at cap.
        """
        validate_pattern(pattern)
        entries = []
        for path in self.paths():
            if not path_match(pattern, path):
                continue
            versions = self._index.get(path, {})
            if version_sel == Selector.ANY:
                chosen = sorted(versions)
            elif version_sel == Selector.ACTIVE:
                chosen = [v for v in sorted(versions) if versions[v].status == DocumentStatus.ACTIVE]
            else:
                chosen = [version_sel] if version_sel in versions else []
            entries.extend((versions[v].ref, versions[v].block) for v in chosen)
        if len(entries) > cap:
            return entries[:cap], True
        return entries, False

    def paths(self) -> List[str]:
        return sorted(self._index)

    def versions(self, path: str) -> List[int]:
        return sorted(self._index.get(path, {}))

    def highest_version(self, path: str) -> int:
        versions = self._index.get(path, {})
        return max(versions) if versions else 0

    def active_version(self, path: str) -> Optional[int]:
        versions = self._index.get(path, {})
        active = [v for v, sd in versions.items() if sd.status == DocumentStatus.ACTIVE]
        return max(active) if active else None

    def documents(self) -> Iterator[StoredDocument]:
        for path in self.paths():
            versions = self._index[path]
            for version in sorted(versions):
                yield versions[version]

    def count(self) -> int:
        return sum(len(v) for v in self._index.values())

    def status_report(self, path: str, version: VersionSel, peerlist=None) -> str:
        """Human-readable status, signatures with chains, and the activeness trace"""
        stored = self.get(path, version)
        label = peerlist.label if peerlist is not None else (lambda p: p.short())

        lines = [
            f"document: {stored.id}",
            f"status: {stored.status.value}",
            f"size: {stored.document.size} bytes",
            f"digest: {stored.document.content_digest.hex()}",
            f"signers: {len(stored.block)}",
        ]
        for record in stored.block.records:
            chain = ' -> '.join(label(p) for p in record.chain + (record.signer,))
            kind = 'originator' if record.is_originator else 'chain'
            lines.append(f"  {label(record.signer)}  {kind}: {chain}")
        if peerlist is not None:
            lines.extend(peerlist.activeness_trace(stored.id.path, stored.block))
        return '\n'.join(lines)

    # --- auxiliary state ----------------------------------------------------

    def save_state(self, name: str, data):
        with self._lock:
            self.backend.save_json(name, data)

    def load_state(self, name: str, default=None):
        return self.backend.load_json(name, default)
