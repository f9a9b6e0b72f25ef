#!/usr/bin/env python3
"""
Admin tool commands that need no running group: keys, peerlists, local
status, the simulator and exit codes
"""

import contextlib
import io
import json
import os
import tempfile

from database import DocumentDatabase, StoredDocument
from documents import DocumentId, DocumentStatus, make_document
from identity import load_keypair, load_public_key
import main as cli
from policy import parse_peerlist
from signatures import SignatureBlock, sign_document


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(list(argv))
    return code, out.getvalue(), err.getvalue()


def make_group(tmp):
    """Three peer keys, one admin key and a bootstrap peerlist in tmp"""
    for i, name in enumerate(('p1', 'p2', 'p3', 'a1'), start=1):
        code, _, _ = run('keygen', os.path.join(tmp, name), '--seed', f"{i:02x}" * 32)
        assert code == 0
    policy = os.path.join(tmp, 'policy.txt')
    with open(policy, 'w', encoding='utf-8') as f:
        f.write("path /docs/** { authors: any; active: quorum(2, {P1,P2,P3}); }\n")
    peerlist = os.path.join(tmp, 'peerlist')
    code, out, _ = run('peerlist-make', peerlist,
                       '--peer', f"P1:{tmp}/p1:127.0.0.1:7401",
                       '--peer', f"P2:{tmp}/p2.pub:127.0.0.1:7402",
                       '--peer', f"P3:{tmp}/p3:127.0.0.1:7403",
                       '--admin', f"A1:{tmp}/a1.pub", '--policy', policy)
    assert code == 0, out
    return peerlist


def test_keygen_is_deterministic_with_seed():
    with tempfile.TemporaryDirectory() as tmp:
        first, second = os.path.join(tmp, 'one'), os.path.join(tmp, 'two')
        assert run('keygen', first, '--seed', 'ab' * 32)[0] == 0
        assert run('keygen', second, '--seed', 'ab' * 32)[0] == 0
        assert load_keypair(first) == load_keypair(second)
        assert load_public_key(first + '.pub') == load_keypair(first).public
        assert oct(os.stat(first).st_mode & 0o777) == '0o600'
        code, _, err = run('keygen', os.path.join(tmp, 'short'), '--seed', 'ab')
        assert code == 1 and err.startswith('❌')


def test_peerlist_make():
    with tempfile.TemporaryDirectory() as tmp:
        path = make_group(tmp)
        with open(path, 'rb') as f:
            peerlist = parse_peerlist(f.read(), 0)
        assert len(peerlist.group()) == 3 and len(peerlist.admins()) == 1
        assert peerlist.entry(peerlist.resolve('A1')).address == '-'
        rule = peerlist.match_rule('/docs/readme')
        assert rule.pattern == '/docs/**' and not rule.default

        code, _, err = run('peerlist-make', os.path.join(tmp, 'bad'), '--peer', f"P9:{tmp}/p1")
        assert code == 1 and 'bad entry' in err


def test_peerlist_sign_requires_admin_key():
    with tempfile.TemporaryDirectory() as tmp:
        peerlist = make_group(tmp)
        code, _, err = run('peerlist-sign', peerlist, '--key', os.path.join(tmp, 'p2'), '--peerlist', peerlist)
        assert code == 1 and 'not an administrator' in err


def test_status_and_blacklist_from_store():
    with tempfile.TemporaryDirectory() as tmp:
        peerlist = make_group(tmp)
        store_dir = os.path.join(tmp, 'store')
        key = load_keypair(os.path.join(tmp, 'p1'))
        doc = make_document('/docs/readme', 1, b'read me')
        block = SignatureBlock(doc.ref, (sign_document(key, doc.ref),))
        db = DocumentDatabase(store_dir)
        db.put(StoredDocument(doc, block, DocumentStatus.PENDING, received_at=1.0, origin=key.peer_id()))
        db.save_state('blacklist', {})

        options = ('--key', os.path.join(tmp, 'p1'), '--peerlist', peerlist, '--store', store_dir)
        code, out, _ = run('status', '/docs/readme', '1', *options)
        assert code == 0
        assert 'document: /docs/readme@1' in out and 'P1' in out

        code, out, _ = run('blacklist-show', *options)
        assert code == 0 and 'No blacklisted peers' in out

        code, _, err = run('status', '/docs/missing', *options)
        assert code == 1 and err.startswith('❌')
        assert DocumentDatabase(store_dir).lookup(DocumentId('/docs/readme', 1)) is not None


def test_simulate_builtin_writes_records():
    with tempfile.TemporaryDirectory() as tmp:
        jsonl = os.path.join(tmp, 'runs.jsonl')
        code, out, _ = run('simulate', '--builtin', 'honest', '--seed', '2', '--seeds', '2', '--jsonl', jsonl)
        assert code == 0
        assert 'seed 2' in out and 'seed 3' in out
        with open(jsonl, 'r', encoding='utf-8') as f:
            records = [json.loads(line) for line in f]
        assert {r['seed'] for r in records} == {2, 3}


def test_simulate_failed_expectation_exits_one():
    with tempfile.TemporaryDirectory() as tmp:
        scenario = os.path.join(tmp, 'tight.scenario')
        with open(scenario, 'w', encoding='utf-8') as f:
            f.write("n_peers = 5\nat 0 inject P1 /t/a 16\nat 200 fetch P5 /t/a @ 1\nexpect fetch_version 2 P5\n")
        code, out, _ = run('simulate', scenario)
        assert code == 1 and 'FAIL' in out


def test_usage_errors_exit_two():
    assert run()[0] == 2
    assert run('get')[0] == 2
    assert run('frobnicate')[0] == 2
    assert run('--help')[0] == 0
    code, _, err = run('get', '/a')
    assert code == 1 and '--config' in err


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
