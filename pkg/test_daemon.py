#!/usr/bin/env python3
"""
Daemon tests on loopback: the authentication handshake, node config
files and a three-peer group spreading a document end to end
"""

import asyncio
import hashlib
import os
import socket
import tempfile
import time

from daemon import AUTH_CONTEXT, Node, NodeConfig, handshake, load_node_config, open_node, parse_node_config
from database import DocumentDatabase
from documents import Selector
from engine import FetchCompleted
from errors import BadPeerlist, ConfigError, DdnfsError, Malformed, NotAuthorized
from identity import Role, generate_keypair, save_keypair, sign
from policy import PeerEntry, make_peerlist_body, parse_peerlist
from wire import make_banner

PEERS = ('P1', 'P2', 'P3')
KEYS = {name: generate_keypair(hashlib.sha256(f"daemon-test:{name}".encode()).digest())
        for name in PEERS + ('A1', 'X')}


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(('127.0.0.1', 0))
        return s.getsockname()[1]


def make_peerlist(addresses, extra=()):
    listed = [PeerEntry(KEYS[n].peer_id(), KEYS[n].public, addresses[n], Role.PEER, n) for n in PEERS]
    listed.append(PeerEntry(KEYS['A1'].peer_id(Role.ADMIN), KEYS['A1'].public, '-', Role.ADMIN, 'A1'))
    for name in extra:
        listed.append(PeerEntry(KEYS[name].peer_id(), KEYS[name].public, '127.0.0.1:1', Role.PEER, name))
    return parse_peerlist(make_peerlist_body(listed, ''), 0)


def node_config(**overrides) -> NodeConfig:
    settings = dict(key_file='-', peerlist_file='-', store_dir=None, request_timeout=3.0,
                    tick_seconds=0.1, idle_timeout=30.0)
    settings.update(overrides)
    return NodeConfig(**settings)


async def _handshake_pair(server_kp, server_pl, client_kp, client_pl):
    """(server outcome, client outcome); an outcome is a PeerId or the raised error"""
    loop = asyncio.get_running_loop()
    result = loop.create_future()

    async def on_connect(reader, writer):
        try:
            result.set_result(await handshake(reader, writer, server_kp, server_pl))
        except DdnfsError as e:
            result.set_result(e)
        finally:
            writer.close()

    server = await asyncio.start_server(on_connect, '127.0.0.1', 0)
    port = server.sockets[0].getsockname()[1]
    reader, writer = await asyncio.open_connection('127.0.0.1', port)
    try:
        client = await asyncio.wait_for(handshake(reader, writer, client_kp, client_pl), 5)
    except (DdnfsError, ConnectionError) as e:
        client = e
    finally:
        writer.close()
    server_side = await asyncio.wait_for(result, 5)
    server.close()
    await server.wait_closed()
    return server_side, client


def test_handshake_authenticates_both_sides():
    peerlist = make_peerlist({n: f"127.0.0.1:{7200 + i}" for i, n in enumerate(PEERS)})
    server, client = asyncio.run(_handshake_pair(KEYS['P1'], peerlist, KEYS['P2'], peerlist))
    assert server == KEYS['P2'].peer_id()
    assert client == KEYS['P1'].peer_id()


def test_handshake_rejects_unlisted_key():
    addresses = {n: f"127.0.0.1:{7200 + i}" for i, n in enumerate(PEERS)}
    server, client = asyncio.run(_handshake_pair(KEYS['P1'], make_peerlist(addresses),
                                                 KEYS['X'], make_peerlist(addresses, extra=('X',))))
    assert isinstance(server, NotAuthorized)
    assert isinstance(client, (Malformed, ConnectionError))


def test_handshake_rejects_forged_proof():
    peerlist = make_peerlist({n: f"127.0.0.1:{7200 + i}" for i, n in enumerate(PEERS)})

    async def forge():
        loop = asyncio.get_running_loop()
        result = loop.create_future()

        async def on_connect(reader, writer):
            try:
                result.set_result(await handshake(reader, writer, KEYS['P1'], peerlist))
            except DdnfsError as e:
                result.set_result(e)
            finally:
                writer.close()

        server = await asyncio.start_server(on_connect, '127.0.0.1', 0)
        port = server.sockets[0].getsockname()[1]
        reader, writer = await asyncio.open_connection('127.0.0.1', port)
        # claims to be P2 but can only sign with X's key
        claimed = KEYS['P2'].peer_id().fingerprint
        writer.write(make_banner())
        writer.write(f"HELLO {claimed.hex()} {os.urandom(16).hex()}\r\n".encode('ascii'))
        await reader.readline()
        their_nonce = bytes.fromhex((await reader.readline()).decode('ascii').split()[2])
        proof = sign(KEYS['X'], AUTH_CONTEXT + their_nonce + claimed)
        writer.write(f"PROOF {proof.hex()}\r\n".encode('ascii'))
        await writer.drain()
        outcome = await asyncio.wait_for(result, 5)
        writer.close()
        server.close()
        await server.wait_closed()
        return outcome

    outcome = asyncio.run(forge())
    assert isinstance(outcome, NotAuthorized), outcome


def test_parse_node_config():
    config = parse_node_config("""
        # peer one
        key_file = keys/p1
        peerlist_file = /etc/ddnfs/peerlist
        store_dir = store
        fanout = 5
        request_timeout = 2.5
    """, base_dir='/srv/p1')
    assert config.key_file == '/srv/p1/keys/p1'
    assert config.peerlist_file == '/etc/ddnfs/peerlist'
    assert config.store_dir == '/srv/p1/store'
    assert config.fanout == 5 and config.request_timeout == 2.5
    assert config.engine_config().fanout == 5

    for text in ('key_file = k', 'key_file = k\npeerlist_file = p\ncolour = blue',
                 'key_file = k\npeerlist_file = p\nfanout = lots', 'key_file = k\npeerlist_file = p\nfanout = 0',
                 'key_file k'):
        try:
            parse_node_config(text)
            assert False, f"accepted {text!r}"
        except ConfigError:
            pass
    try:
        load_node_config('/nonexistent/ddnfs.conf')
        assert False
    except ConfigError:
        pass


def test_open_node_checks_the_peerlist():
    addresses = {n: f"127.0.0.1:{7300 + i}" for i, n in enumerate(PEERS)}
    with tempfile.TemporaryDirectory() as tmp:
        with open(os.path.join(tmp, 'peerlist'), 'wb') as f:
            f.write(make_peerlist(addresses).encode())
        for name in ('P1', 'A1', 'X'):
            save_keypair(os.path.join(tmp, name.lower()), KEYS[name])
        with open(os.path.join(tmp, 'p1.conf'), 'w', encoding='utf-8') as f:
            f.write("key_file = p1\npeerlist_file = peerlist\nstore_dir = store-p1\n")

        node = open_node(load_node_config(os.path.join(tmp, 'p1.conf')))
        assert node.listen == addresses['P1']
        assert node.engine.self_id == KEYS['P1'].peer_id()

        moved = node_config(key_file=os.path.join(tmp, 'p1'), peerlist_file=os.path.join(tmp, 'peerlist'),
                            listen='127.0.0.1:1')
        stranger = node_config(key_file=os.path.join(tmp, 'x'), peerlist_file=os.path.join(tmp, 'peerlist'))
        admin = node_config(key_file=os.path.join(tmp, 'a1'), peerlist_file=os.path.join(tmp, 'peerlist'))
        for config in (moved, stranger, admin):
            try:
                open_node(config)
                assert False, f"opened {config.key_file}"
            except BadPeerlist:
                pass
        assert open_node(admin, listen=False, tag_prefix='c').listen is None


async def _wait_until(condition, timeout):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if condition():
            return True
        await asyncio.sleep(0.05)
    return condition()


def test_document_spreads_between_daemons():
    addresses = {n: f"127.0.0.1:{free_port()}" for n in PEERS}
    peerlist = make_peerlist(addresses)

    async def scenario():
        nodes = {n: Node(KEYS[n], parse_peerlist(peerlist.encode(), 0), DocumentDatabase(), node_config(),
                         listen=addresses[n]) for n in PEERS}
        tool = Node(KEYS['A1'], parse_peerlist(peerlist.encode(), 0), DocumentDatabase(), node_config(),
                    tag_prefix='c')
        for node in list(nodes.values()) + [tool]:
            await node.start()
        try:
            p1 = nodes['P1']
            doc_id = await p1.submit(lambda: p1.engine.inject_document('/docs/hello', b'hello group', time.time()))
            assert doc_id.version == 1

            everywhere = await _wait_until(
                lambda: all(n.engine.store.active_version('/docs/hello') == 1 for n in nodes.values()), 5.0)
            assert everywhere, {n: node.engine.store.versions('/docs/hello') for n, node in nodes.items()}

            p2 = nodes['P2']
            _, outcome = await p2.run_command(
                lambda: p2.engine.fetch_redundant('/docs/hello', Selector.ACTIVE, 1, time.time()),
                lambda a: isinstance(a, FetchCompleted), 5.0)
            assert outcome is not None and outcome.error is None, outcome
            assert outcome.document.content == b'hello group'

            # the admin tool has no address, so answers must come back over its own connection
            _, outcome = await tool.run_command(
                lambda: tool.engine.fetch_redundant('/docs/hello', Selector.ACTIVE, 0, time.time(),
                                                    [tool.peerlist.resolve('P3')]),
                lambda a: isinstance(a, FetchCompleted), 5.0)
            assert outcome is not None and outcome.error is None, outcome
            assert outcome.document.id == doc_id
        finally:
            for node in [tool] + list(nodes.values()):
                await node.stop()

    asyncio.run(scenario())


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
