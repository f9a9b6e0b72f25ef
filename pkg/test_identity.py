#!/usr/bin/env python3
"""
Tests for key pairs, fingerprints and signature checks
"""

import os
import tempfile

from errors import MalformedKey, MalformedSignature, SeedTooShort
from identity import (PeerId, Role, fingerprint, generate_keypair, load_keypair, load_public_key,
                      save_keypair, sign, verify)

SEED = b'identity-test-seed-0123456789abcdef'


def test_seeded_keys_are_deterministic():
    a = generate_keypair(SEED)
    b = generate_keypair(SEED)
    assert a.public == b.public
    assert a.peer_id() == b.peer_id()
    assert a.peer_id().fingerprint == fingerprint(a.public)


def test_short_seed_rejected():
    try:
        generate_keypair(b'too short')
        assert False, "expected SeedTooShort"
    except SeedTooShort:
        pass


def test_sign_and_verify():
    kp = generate_keypair(SEED)
    sig = sign(kp, b'payload')
    assert len(sig) == 64
    assert verify(kp.public, b'payload', sig)
    assert not verify(kp.public, b'payload!', sig)
    other = generate_keypair(SEED + b'x')
    assert not verify(other.public, b'payload', sig)


def test_malformed_inputs():
    kp = generate_keypair(SEED)
    try:
        verify(kp.public[:31], b'x', sign(kp, b'x'))
        assert False, "expected MalformedKey"
    except MalformedKey:
        pass
    try:
        verify(kp.public, b'x', b'\x00' * 10)
        assert False, "expected MalformedSignature"
    except MalformedSignature:
        pass


def test_peer_id_ignores_role_in_equality():
    kp = generate_keypair(SEED)
    assert kp.peer_id(Role.ADMIN) == kp.peer_id(Role.PEER)
    assert kp.peer_id(Role.ADMIN).role == Role.ADMIN
    assert PeerId.from_hex(kp.peer_id().hex) == kp.peer_id()
    assert len(kp.peer_id().short()) == 8


def test_key_files_round_trip():
    kp = generate_keypair(SEED)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'peer.key')
        save_keypair(path, kp)
        assert load_keypair(path) == kp
        assert load_public_key(path + '.pub') == kp.public
        assert os.stat(path).st_mode & 0o777 == 0o600


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
