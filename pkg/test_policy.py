#!/usr/bin/env python3
"""
Tests for the policy language and peerlist documents
"""

import hashlib

from documents import make_document
from errors import (BadPattern, NotAdmin, PeerlistParseError, PolicySyntaxError, UnknownPeerRef,
                    VersionNotNewer)
from identity import Role, generate_keypair
from policy import (AdminSigned, And, Or, PeerEntry, Quorum, Signed, format_policy, make_peerlist_body,
                    parse_peerlist)
from signatures import SignatureBlock, sign_document

KEYS = {name: generate_keypair(hashlib.sha256(f"policy-test:{name}".encode()).digest())
        for name in ('P1', 'P2', 'P3', 'P4', 'A1')}


def make_peerlist(policy: str = '', version: int = 0):
    entries = [PeerEntry(KEYS[n].peer_id(), KEYS[n].public, f"127.0.0.1:{7000 + i}", Role.PEER, n)
               for i, n in enumerate(('P1', 'P2', 'P3', 'P4'), start=1)]
    entries.append(PeerEntry(KEYS['A1'].peer_id(Role.ADMIN), KEYS['A1'].public, '-', Role.ADMIN, 'A1'))
    return parse_peerlist(make_peerlist_body(entries, policy), version)


def pid(name):
    return KEYS[name].peer_id(Role.ADMIN if name.startswith('A') else Role.PEER)


def signed_by(*names):
    return frozenset(pid(n) for n in names)


def _expect(error, fn, *args):
    try:
        fn(*args)
    except error:
        return
    raise AssertionError(f"expected {error.__name__}")


def test_parse_rules_and_evaluate():
    peerlist = make_peerlist(
        "path /docs/** { authors: P1, P2; active: quorum(3, {P1,P2,P3,P4}); }\n"
        "path /admin/* { authors: any; active: admin(A1) and signed(P1) or quorum(4, {P1,P2,P3,P4}); }\n")
    docs = peerlist.match_rule('/docs/a/b')
    assert docs.authors == {pid('P1'), pid('P2')}
    assert isinstance(docs.activeness, Quorum)
    assert not docs.activeness.evaluate(signed_by('P1', 'P2'))
    assert docs.activeness.evaluate(signed_by('P1', 'P2', 'P4'))

    admin = peerlist.match_rule('/admin/x').activeness
    assert isinstance(admin, Or) and isinstance(admin.left, And)
    assert isinstance(admin.left.left, AdminSigned) and isinstance(admin.left.right, Signed)
    assert admin.evaluate(signed_by('A1', 'P1'))
    assert not admin.evaluate(signed_by('A1', 'P2'))
    assert admin.evaluate(signed_by('P1', 'P2', 'P3', 'P4'))


def test_default_rule_is_majority():
    peerlist = make_peerlist()
    rule = peerlist.match_rule('/anything')
    assert rule.default and rule.authors is None
    assert rule.activeness.k == 3
    assert not rule.activeness.evaluate(signed_by('P1', 'P2'))
    assert rule.activeness.evaluate(signed_by('P1', 'P2', 'P3'))
    assert not rule.activeness.evaluate(signed_by('P1', 'P2', 'A1'))


def test_first_matching_rule_wins():
    peerlist = make_peerlist(
        "path /a/b { authors: P3; active: signed(P3); }\n"
        "path /a/* { authors: any; active: quorum(2, {P1,P2}); }\n")
    assert peerlist.authorized_author('/a/b', pid('P3'))
    assert not peerlist.authorized_author('/a/b', pid('P1'))
    assert peerlist.authorized_author('/a/c', pid('P1'))


def test_syntax_errors_carry_line():
    try:
        make_peerlist("path /a/** { authors: any; active: quorum(2, {P1,P2}); }\n"
                      "path /b/** { authors: any; active: signed(P1) }\n")
        assert False
    except PolicySyntaxError as e:
        assert e.line == 2
    _expect(PolicySyntaxError, make_peerlist, "path /x { authors: any; active: not signed(P1); }")
    _expect(PolicySyntaxError, make_peerlist, "path /x { authors: any; active: quorum(5, {P1,P2}); }")
    _expect(PolicySyntaxError, make_peerlist, "path /x { authors: any; }")


def test_unknown_references():
    _expect(UnknownPeerRef, make_peerlist, "path /x { authors: any; active: signed(P9); }")
    _expect(UnknownPeerRef, make_peerlist, "path /x { authors: any; active: admin(P1); }")
    _expect(BadPattern, make_peerlist, "path /x/**/y { authors: any; active: signed(P1); }")


def test_resolve_by_name_and_hex_prefix():
    peerlist = make_peerlist()
    assert peerlist.resolve('P2') == pid('P2')
    assert peerlist.resolve(pid('P3').hex[:12]) == pid('P3')
    assert peerlist.resolve('A1').role == Role.ADMIN
    _expect(UnknownPeerRef, peerlist.resolve, 'nobody')


def test_peerlist_round_trip_and_roles():
    policy = "path /docs/** { authors: any; active: quorum(2, {P1,P2,P3}); }"
    peerlist = make_peerlist(policy)
    assert len(peerlist.group()) == 4
    assert peerlist.admins() == [pid('A1')]
    assert peerlist.role_of(pid('A1')) == Role.ADMIN
    again = parse_peerlist(peerlist.encode(), 0)
    assert again.directory() == peerlist.directory()
    assert format_policy(again.rules) == format_policy(peerlist.rules)


def test_malformed_peerlists():
    _expect(PeerlistParseError, parse_peerlist, b'no header\n', 0)
    good = make_peerlist().encode().decode()
    tampered = good.replace(pid('P1').hex, pid('P2').hex, 1)
    _expect(PeerlistParseError, parse_peerlist, tampered.encode(), 0)
    _expect(PeerlistParseError, parse_peerlist, good.replace('policy:\n', '').encode(), 0)


def test_activeness_trace():
    peerlist = make_peerlist("path /docs/** { authors: any; active: quorum(2, {P1,P2,P3}); }")
    doc = make_document('/docs/x', 1, b'x')
    block = SignatureBlock(doc.ref, (sign_document(KEYS['P1'], doc.ref),))
    trace = peerlist.activeness_trace('/docs/x', block)
    assert trace[0] == 'policy: rule /docs/**'
    assert trace[1] == 'quorum(2, {' + ','.join(sorted(('P1', 'P2', 'P3'), key=lambda n: pid(n).fingerprint)) + '}): 1/2 -> false'
    assert trace[-1] == 'active: false'


def test_peerlist_update_validation():
    from policy import validate_peerlist_update
    current = make_peerlist()
    body = make_peerlist("path /x { authors: any; active: signed(P1); }").encode()
    doc = make_document('/peerlist', 1, body)

    by_admin = SignatureBlock(doc.ref, (sign_document(KEYS['A1'], doc.ref, role=Role.ADMIN),))
    candidate = validate_peerlist_update(current, doc, by_admin)
    assert candidate.version == 1 and len(candidate.rules) == 1

    by_peer = SignatureBlock(doc.ref, (sign_document(KEYS['P1'], doc.ref),))
    _expect(NotAdmin, validate_peerlist_update, current, doc, by_peer)
    _expect(VersionNotNewer, validate_peerlist_update, make_peerlist(version=1), doc, by_admin)


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
