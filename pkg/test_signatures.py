#!/usr/bin/env python3
"""
Tests for hierarchical signature blocks: signing, verification, merging
"""

import hashlib
import random
from dataclasses import replace

from documents import make_document
from errors import (AlreadySigned, BadSignature, ConflictingRecord, DigestMismatch, InvalidSize, InvalidVersion,
                    LengthMismatch, MissingChainRecord, MultipleOriginators, ParentUnknown, UnknownSigner)
from identity import generate_keypair
from signatures import (SignatureBlock, SignatureRecord, decode_block, encode_block, merge_blocks,
                        sign_document, unsigned_peers, verify_block)

NAMES = ['O', 'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K']
KEYS = {name: generate_keypair(hashlib.sha256(f"sig-test:{name}".encode()).digest()) for name in NAMES}
IDS = {name: kp.peer_id() for name, kp in KEYS.items()}
DIRECTORY = {kp.peer_id(): kp.public for kp in KEYS.values()}
DOC = make_document('/notes/plan', 1, b'the plan')


def originate(name='O', doc=DOC):
    return SignatureBlock(doc.ref, (sign_document(KEYS[name], doc.ref),))


def receive(block, name, parent):
    """name gets block from parent and adds its record"""
    return block.with_record(sign_document(KEYS[name], block.doc_ref, block, parent=IDS[parent]))


def _expect(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error:
        return
    raise AssertionError(f"expected {error.__name__}")


def two_path_replay():
    """O -> A -> F, then O -> C -> D -> F"""
    at_o = originate()
    at_a = receive(at_o, 'A', 'O')
    at_f = receive(at_a, 'F', 'A')
    at_c = receive(at_o, 'C', 'O')
    at_d = receive(at_c, 'D', 'C')
    merged, newly = merge_blocks(at_f, at_d)
    return merged, newly


def test_replay_signs_once():
    merged, newly = two_path_replay()
    assert len(merged) == 5
    assert merged.signers == {IDS[n] for n in 'OACDF'}
    assert newly == {IDS['C'], IDS['D']}
    assert merged.get(IDS['F']).chain == (IDS['O'], IDS['A'])
    assert merged.get(IDS['D']).chain == (IDS['O'], IDS['C'])
    assert merged.originator == IDS['O']
    verify_block(DOC, merged, DIRECTORY)
    _expect(AlreadySigned, sign_document, KEYS['F'], DOC.ref, merged, parent=IDS['D'])


def test_replay_is_bit_identical():
    first, _ = two_path_replay()
    second, _ = two_path_replay()
    assert encode_block(first) == encode_block(second)


def test_strip_resistance():
    merged, _ = two_path_replay()
    for inner in ('O', 'A', 'C'):
        _expect(MissingChainRecord, verify_block, DOC, merged.without(IDS[inner]), DIRECTORY)
    assert set(merged.leaves()) == {IDS['F'], IDS['D']}
    leafless = merged.without(*merged.leaves())
    verify_block(DOC, leafless, DIRECTORY)
    assert len(leafless) == 3


def test_missing_chain_record_names_signer():
    merged, _ = two_path_replay()
    try:
        verify_block(DOC, merged.without(IDS['A']), DIRECTORY)
        assert False
    except MissingChainRecord as e:
        assert e.signer == IDS['A']


def test_tampered_signature():
    block = receive(originate(), 'A', 'O')
    record = block.get(IDS['A'])
    forged = SignatureRecord(record.signer, record.chain, bytes([record.sig[0] ^ 1]) + record.sig[1:])
    bad = block.without(IDS['A']).with_record(forged)
    try:
        verify_block(DOC, bad, DIRECTORY)
        assert False
    except BadSignature as e:
        assert e.signer == IDS['A']


def test_wrong_content_and_unknown_signer():
    block = receive(originate(), 'A', 'O')
    other = make_document('/notes/plan', 1, b'another plan')
    _expect(DigestMismatch, verify_block, other, block, DIRECTORY)
    partial = {pid: key for pid, key in DIRECTORY.items() if pid != IDS['A']}
    _expect(UnknownSigner, verify_block, DOC, block, partial)


def test_more_records_than_signers_rejected():
    block = receive(receive(originate(), 'A', 'O'), 'B', 'A')
    pair = {IDS['O']: DIRECTORY[IDS['O']], IDS['A']: DIRECTORY[IDS['A']]}
    _expect(LengthMismatch, verify_block, DOC, block, pair)
    _expect(LengthMismatch, verify_block, DOC, block, {})
    verify_block(DOC, block, {**pair, IDS['B']: DIRECTORY[IDS['B']]})


def test_out_of_range_reference_rejected():
    zero = replace(DOC.ref, version=0)
    block = SignatureBlock(zero, (sign_document(KEYS['O'], zero),))
    _expect(InvalidVersion, verify_block, zero, block, DIRECTORY)
    huge = replace(DOC.ref, size=2 ** 64)
    forged = SignatureBlock(huge, (SignatureRecord(IDS['O'], (), bytes(64)),))
    _expect(InvalidSize, verify_block, huge, forged, DIRECTORY)


def test_two_originators_rejected():
    block = originate('O').with_record(sign_document(KEYS['B'], DOC.ref))
    _expect(MultipleOriginators, verify_block, DOC, block, DIRECTORY)


def test_parent_must_be_in_block():
    block = originate()
    _expect(ParentUnknown, sign_document, KEYS['A'], DOC.ref, block, parent=IDS['B'])
    _expect(ParentUnknown, sign_document, KEYS['A'], DOC.ref, block)


def test_conflicting_records():
    via_o = receive(receive(originate(), 'A', 'O'), 'B', 'O')
    via_a = receive(receive(originate(), 'A', 'O'), 'B', 'A')
    _expect(ConflictingRecord, merge_blocks, via_o, via_a)


def test_block_encoding_round_trip():
    merged, _ = two_path_replay()
    data = encode_block(merged)
    assert decode_block(DOC.ref, data) == merged
    assert unsigned_peers(merged, IDS.values()) == {IDS[n] for n in NAMES if n not in 'OACDF'}


def _random_distribution(rng):
    """Blocks as held by each peer right after it signed, for one random spread"""
    size = rng.randint(2, len(NAMES))
    members = rng.sample(NAMES, size)
    doc = make_document('/prop/doc', rng.randint(1, 5), rng.randbytes(rng.randint(0, 32)))
    views = {members[0]: originate(members[0], doc)}
    for name in members[1:]:
        parent = rng.choice(list(views))
        views[name] = receive(views[parent], name, parent)
    return doc, list(views.values())


def test_merge_algebra():
    rng = random.Random(20240501)
    for _ in range(1000):
        doc, views = _random_distribution(rng)
        for view in views:
            verify_block(doc, view, DIRECTORY)
        a, b, c = (rng.choice(views) for _ in range(3))
        ab, _ = merge_blocks(a, b)
        ba, _ = merge_blocks(b, a)
        assert ab == ba
        assert merge_blocks(a, a)[0] == a
        assert merge_blocks(ab, c)[0] == merge_blocks(a, merge_blocks(b, c)[0])[0]
        everything = views[0]
        for view in views[1:]:
            everything, _ = merge_blocks(everything, view)
        verify_block(doc, everything, DIRECTORY)
        assert len(everything) == len(views)


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
