#!/usr/bin/env python3
"""
Tests for the document database on both backends, including recovery
after an interrupted write
"""

import hashlib
import os
import tempfile

from database import DiskStorage, DocumentDatabase, StoredDocument
from documents import DocumentId, DocumentStatus, Selector, make_document
from errors import ConflictDetected, InvalidTransition, NotFound, StoreFull
from identity import generate_keypair
from memory_storage import MemoryStorage
from signatures import SignatureBlock, encode_block, sign_document

KEYS = [generate_keypair(hashlib.sha256(f"store-test:{i}".encode()).digest()) for i in range(3)]


def stored(path, version, content, status=DocumentStatus.PENDING, signers=1):
    doc = make_document(path, version, content)
    block = SignatureBlock(doc.ref, (sign_document(KEYS[0], doc.ref),))
    for i in range(1, signers):
        block = block.with_record(sign_document(KEYS[i], doc.ref, block, parent=KEYS[i - 1].peer_id()))
    return StoredDocument(doc, block, status, received_at=100.0, origin=KEYS[0].peer_id())


def _expect(error, fn, *args):
    try:
        fn(*args)
    except error:
        return
    raise AssertionError(f"expected {error.__name__}")


def test_put_and_get_selectors():
    db = DocumentDatabase()
    db.put(stored('/a/x', 1, b'one'), now=1.0)
    db.put(stored('/a/x', 2, b'two'), now=2.0)
    db.activate(DocumentId('/a/x', 1), now=3.0)
    assert db.get('/a/x', Selector.ANY).document.content == b'two'
    assert db.get('/a/x', Selector.ACTIVE).document.content == b'one'
    assert db.get('/a/x', 2).status == DocumentStatus.PENDING
    _expect(NotFound, db.get, '/a/x', 3)
    _expect(NotFound, db.get, '/a/y', Selector.ANY)
    assert db.highest_version('/a/x') == 2 and db.active_version('/a/x') == 1


def test_same_id_different_digest_conflicts():
    db = DocumentDatabase()
    db.put(stored('/c', 1, b'first'))
    try:
        db.put(stored('/c', 1, b'second'))
        assert False
    except ConflictDetected as e:
        assert e.existing.document.content == b'first'
    again = db.put(stored('/c', 1, b'first', signers=3))
    assert len(again.block) == 3 and db.count() == 1


def test_activation_supersedes_older_versions():
    db = DocumentDatabase()
    for v in (1, 2, 3):
        db.put(stored('/d', v, f"v{v}".encode()))
    db.activate(DocumentId('/d', 1))
    changes = db.activate(DocumentId('/d', 3))
    assert (DocumentId('/d', 3), DocumentStatus.PENDING, DocumentStatus.ACTIVE) in changes
    assert db.lookup(DocumentId('/d', 1)).status == DocumentStatus.SUPERSEDED
    assert db.lookup(DocumentId('/d', 2)).status == DocumentStatus.SUPERSEDED
    assert db.active_version('/d') == 3
    _expect(InvalidTransition, db.set_status, DocumentId('/d', 1), DocumentStatus.ACTIVE)


def test_list_patterns_and_cap():
    db = DocumentDatabase()
    for i in range(5):
        db.put(stored(f"/logs/{i}", 1, b'x'))
    db.put(stored('/logs/deep/one', 1, b'y'))
    entries, truncated = db.list('/logs/*')
    assert [ref.path for ref, _ in entries] == [f"/logs/{i}" for i in range(5)] and not truncated
    entries, _ = db.list('/logs/**')
    assert len(entries) == 6
    entries, truncated = db.list('/logs/**', Selector.ANY, cap=4)
    assert len(entries) == 4 and truncated
    assert db.list('/logs/*', Selector.ACTIVE) == ([], False)


def test_store_limit():
    db = DocumentDatabase(max_documents=2)
    db.put(stored('/l/1', 1, b'1'))
    db.put(stored('/l/2', 1, b'2'))
    _expect(StoreFull, db.put, stored('/l/3', 1, b'3'))


def test_gc_superseded():
    db = DocumentDatabase()
    for v in range(1, 6):
        db.put(stored('/g', v, bytes([v])))
    db.activate(DocumentId('/g', 5))
    assert db.gc_superseded(keep_last=1) == 3
    assert db.versions('/g') == [4, 5]


def test_disk_store_survives_restart():
    with tempfile.TemporaryDirectory() as tmp:
        db = DocumentDatabase(tmp)
        db.put(stored('/p q/r', 1, b'spaces in path'), now=1.0)
        db.put(stored('/p q/r', 2, b'newer', signers=2), now=2.0)
        db.activate(DocumentId('/p q/r', 2), now=3.0)
        db.update_block(DocumentId('/p q/r', 2), stored('/p q/r', 2, b'newer', signers=3).block)
        db.save_state('blacklist', {'abc': 'equivocation'})

        reopened = DocumentDatabase(tmp)
        assert reopened.count() == 2
        assert reopened.lookup(DocumentId('/p q/r', 1)).status == DocumentStatus.SUPERSEDED
        top = reopened.get('/p q/r', Selector.ACTIVE)
        assert top.id.version == 2
        assert len(top.block) == 3 and top.origin == KEYS[0].peer_id()
        assert reopened.load_state('blacklist') == {'abc': 'equivocation'}


def test_interrupted_put_is_discarded():
    with tempfile.TemporaryDirectory() as tmp:
        db = DocumentDatabase(tmp)
        db.put(stored('/ok', 1, b'kept'))
        half = stored('/torn', 1, b'never journaled')
        db.backend.write_content('/torn', 1, half.document.content)
        db.backend.write_block('/torn', 1, encode_block(half.block))
        with open(os.path.join(tmp, 'journal'), 'a', encoding='utf-8') as f:
            f.write('1234 /ok 1 pend')

        reopened = DocumentDatabase(tmp)
        assert reopened.paths() == ['/ok']
        assert ('/torn', 1) not in reopened.backend.list_stored()


def test_backends_offer_the_same_operations():
    def operations(cls):
        return {name for name in vars(cls) if callable(getattr(cls, name)) and not name.startswith('_')}

    assert operations(DiskStorage) == operations(MemoryStorage)
    with tempfile.TemporaryDirectory() as tmp:
        for db in (DocumentDatabase(), DocumentDatabase(tmp)):
            db.save_state('blacklist', {'peer': 'reason'})
            assert db.load_state('blacklist') == {'peer': 'reason'}
            assert db.load_state('missing', []) == []
            assert db.backend.read_journal() == []


def test_status_report():
    db = DocumentDatabase()
    db.put(stored('/r', 1, b'report', signers=2))
    report = db.status_report('/r', 1)
    assert 'document: /r@1' in report
    assert 'status: pending' in report
    assert 'signers: 2' in report


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
