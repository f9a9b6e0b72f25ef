#!/usr/bin/env python3
"""
Tests for documents, paths, version selectors and status transitions
"""

from documents import (DocumentId, DocumentStatus, Selector, VersionOrder, can_transition, check_transition,
                       digest, format_version_sel, make_document, parse_version_sel, path_match,
                       validate_path, validate_pattern, version_order)
from errors import InvalidPath, InvalidPattern, InvalidTransition, InvalidVersion


def _raises(error, fn, *args):
    try:
        fn(*args)
    except error:
        return True
    return False


def test_make_document():
    doc = make_document('/a/b', 1, b'hello')
    assert doc.size == 5
    assert doc.content_digest == digest(b'hello')
    assert doc.ref.id == DocumentId('/a/b', 1)
    assert str(doc.id) == '/a/b@1'


def test_empty_content_is_allowed():
    doc = make_document('/empty', 1, b'')
    assert doc.size == 0
    assert doc.content_digest == digest(b'')


def test_invalid_paths():
    for bad in ('a/b', '/a//b', '/a/../b', '/', '/a/*/b', '/x/**', ''):
        assert _raises(InvalidPath, validate_path, bad), bad
    assert validate_path('/a/b.txt') == '/a/b.txt'


def test_invalid_versions():
    assert _raises(InvalidVersion, make_document, '/a', 0, b'')
    assert _raises(InvalidVersion, make_document, '/a', -1, b'')
    assert _raises(InvalidVersion, make_document, '/a', 2 ** 64, b'')
    assert _raises(InvalidVersion, make_document, '/a', True, b'')
    assert make_document('/a', 2 ** 64 - 1, b'').version == 2 ** 64 - 1


def test_version_order():
    assert version_order(3, 2) == VersionOrder.GREATER
    assert version_order(2, 3) == VersionOrder.LESS
    assert version_order(4, 4) == VersionOrder.EQUAL


def test_version_selectors():
    assert parse_version_sel('*') == Selector.ANY
    assert parse_version_sel('@') == Selector.ACTIVE
    assert parse_version_sel('17') == 17
    assert format_version_sel(Selector.ACTIVE) == '@'
    assert format_version_sel(3) == '3'
    assert _raises(InvalidVersion, parse_version_sel, 'latest')
    assert _raises(InvalidVersion, parse_version_sel, '0')


def test_path_match():
    assert path_match('/a/*', '/a/b')
    assert not path_match('/a/*', '/a/b/c')
    assert path_match('/a/**', '/a/b/c')
    assert path_match('/a/**', '/a/b')
    assert not path_match('/a/**', '/a')
    assert path_match('/**', '/peerlist')
    assert path_match('/docs/x', '/docs/x')
    assert not path_match('/docs/x', '/docs/y')


def test_bad_patterns():
    for bad in ('a/*', '/a/**/b', '/a/b*', '/a//b'):
        assert _raises(InvalidPattern, validate_pattern, bad), bad


def test_status_transitions():
    assert can_transition(DocumentStatus.PENDING, DocumentStatus.ACTIVE)
    assert can_transition(DocumentStatus.ACTIVE, DocumentStatus.SUPERSEDED)
    assert can_transition(DocumentStatus.PENDING, DocumentStatus.SUPERSEDED)
    assert not can_transition(DocumentStatus.ACTIVE, DocumentStatus.PENDING)
    assert not can_transition(DocumentStatus.SUPERSEDED, DocumentStatus.ACTIVE)
    assert _raises(InvalidTransition, check_transition, DocumentStatus.ACTIVE, DocumentStatus.ACTIVE)


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
