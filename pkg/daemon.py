"""
Peer daemon: the replication engine behind authenticated TCP.

Connections open with the protocol banner and a challenge-response
handshake:

    -> ddnfs/1 sha256 ed25519
    -> HELLO <own fingerprint hex> <nonce hex>
    -> PROOF <signature over "ddnfs-auth" + peer nonce + own fingerprint>

Both sides send the same three lines, so dialer and listener share one
routine.  After that the stream carries wire frames.  Every frame, tick
and local command goes through a single queue so the engine is never
entered concurrently.
"""

import asyncio
import logging
import os
import random
import signal
import time
from dataclasses import dataclass
from typing import Awaitable, Callable, Dict, List, Optional, Tuple

from database import DocumentDatabase
from engine import (Action, EngineConfig, ReconcileCompleted, ReplicationEngine, Send)
from errors import (BadPeerlist, BindFailure, BodyLengthMismatch, ConfigError, DdnfsError, Malformed,
                    NotAuthorized, OversizeBody, describe)
from identity import KeyPair, PeerId, load_keypair, sign, verify
from policy import Peerlist, parse_peerlist
from wire import (Decoder, GetAnswer, HeadAnswer, Message, TagCounter, check_banner, describe as describe_frame,
                  encode, is_request, make_banner)

try:
    from config import (FANOUT, IDLE_TIMEOUT, INITIAL_FANOUT, LOG_FORMAT, LOG_LEVEL, MAX_HEADER,
                        RATE_CAPACITY, RATE_REFILL_PER_MIN, REQUEST_TIMEOUT, STORE_DIR, TICK_SECONDS)
except ImportError:
    FANOUT = 3
    INITIAL_FANOUT = 4
    RATE_CAPACITY = 10
    RATE_REFILL_PER_MIN = 10.0
    REQUEST_TIMEOUT = 10.0
    IDLE_TIMEOUT = 60.0
    TICK_SECONDS = 1.0
    STORE_DIR = 'ddnfs_store'
    MAX_HEADER = 8192
    LOG_LEVEL = 'INFO'
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)

AUTH_CONTEXT = b"ddnfs-auth"
NONCE_BYTES = 16
READ_CHUNK = 65536


# --- configuration ----------------------------------------------------------

@dataclass
class NodeConfig:
    key_file: str
    peerlist_file: str
    store_dir: Optional[str] = STORE_DIR
    listen: Optional[str] = None
    fanout: int = FANOUT
    initial_fanout: int = INITIAL_FANOUT
    rate_capacity: int = RATE_CAPACITY
    rate_refill_per_min: float = RATE_REFILL_PER_MIN
    request_timeout: float = REQUEST_TIMEOUT
    idle_timeout: float = IDLE_TIMEOUT
    tick_seconds: float = TICK_SECONDS

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            fanout=self.fanout,
            initial_fanout=self.initial_fanout,
            rate_capacity=self.rate_capacity,
            rate_refill_per_min=self.rate_refill_per_min,
            request_timeout=self.request_timeout,
            round_interval=max(self.tick_seconds * 2, 0.1),
            seed=int.from_bytes(os.urandom(4), 'big'),
        )


_NODE_KEYS = {
    'key_file': str, 'peerlist_file': str, 'store_dir': str, 'listen': str,
    'fanout': int, 'initial_fanout': int, 'rate_capacity': int, 'rate_refill_per_min': float,
    'request_timeout': float, 'idle_timeout': float, 'tick_seconds': float,
}
_PATH_KEYS = ('key_file', 'peerlist_file', 'store_dir')


def parse_node_config(text: str, base_dir: str = '.') -> NodeConfig:
    """key=value lines; relative paths are taken relative to base_dir"""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in _NODE_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _NODE_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}")
        if key in _PATH_KEYS and not os.path.isabs(values[key]):
            values[key] = os.path.join(base_dir, values[key])
    for required in ('key_file', 'peerlist_file'):
        if required not in values:
            raise ConfigError(f"missing required key {required}")
    for key in ('fanout', 'initial_fanout', 'rate_capacity'):
        if key in values and values[key] < 1:
            raise ConfigError(f"{key} must be at least 1")
    return NodeConfig(**values)


def load_node_config(path: str) -> NodeConfig:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read node config {path}: {e}")
    return parse_node_config(text, os.path.dirname(os.path.abspath(path)))


def load_peerlist_file(path: str) -> Peerlist:
    try:
        with open(path, 'rb') as f:
            body = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read peerlist {path}: {e}")
    return parse_peerlist(body, 0)


def split_address(address: str) -> Tuple[str, int]:
    host, _, port = address.rpartition(':')
    if not host or not port.isdigit():
        raise ConfigError(f"bad address {address!r}")
    return host.strip('[]'), int(port)


# --- connections ------------------------------------------------------------

class Connection:
    """One authenticated stream to a peer with its own outbound queue"""

    def __init__(self, peer: PeerId, inbound: bool):
        self.peer = peer
        self.inbound = inbound
        self.reader: Optional[asyncio.StreamReader] = None
        self.writer: Optional[asyncio.StreamWriter] = None
        self.outbox: asyncio.Queue = asyncio.Queue()
        self.last_used = time.monotonic()
        self.tasks: List[asyncio.Task] = []
        self.closed = False

    def touch(self):
        self.last_used = time.monotonic()

    def close(self):
        if self.closed:
            return
        self.closed = True
        for task in self.tasks:
            if task is not asyncio.current_task():
                task.cancel()
        if self.writer is not None:
            self.writer.close()


async def _read_line(reader: asyncio.StreamReader) -> bytes:
    line = await reader.readline()
    if not line.endswith(b'\n'):
        raise Malformed(line.decode('ascii', 'replace'), "connection closed during handshake")
    if len(line) > MAX_HEADER:
        raise Malformed(line[:40].decode('ascii', 'replace'), "handshake line too long")
    return line


async def handshake(reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                    keypair: KeyPair, peerlist: Peerlist) -> PeerId:
    """Mutual authentication; returns the peer's identity from the peerlist"""
    own = keypair.peer_id().fingerprint
    nonce = os.urandom(NONCE_BYTES)
    writer.write(make_banner())
    writer.write(f"HELLO {own.hex()} {nonce.hex()}\r\n".encode('ascii'))
    await writer.drain()

    check_banner(await _read_line(reader))
    hello = (await _read_line(reader)).decode('ascii', 'replace').split()
    if len(hello) != 3 or hello[0] != 'HELLO':
        raise Malformed(' '.join(hello), "expected HELLO")
    try:
        their_fp, their_nonce = bytes.fromhex(hello[1]), bytes.fromhex(hello[2])
    except ValueError:
        raise Malformed(' '.join(hello), "HELLO fields must be hex")
    entry = peerlist.entry(PeerId(their_fp)) if len(their_fp) == 32 else None
    if entry is None:
        raise NotAuthorized(f"{hello[1][:16]} is not in the peerlist")

    proof = sign(keypair, AUTH_CONTEXT + their_nonce + own)
    writer.write(f"PROOF {proof.hex()}\r\n".encode('ascii'))
    await writer.drain()

    answer = (await _read_line(reader)).decode('ascii', 'replace').split()
    if len(answer) != 2 or answer[0] != 'PROOF':
        raise Malformed(' '.join(answer), "expected PROOF")
    try:
        their_proof = bytes.fromhex(answer[1])
    except ValueError:
        raise Malformed(' '.join(answer), "PROOF must be hex")
    if not verify(entry.public_key, AUTH_CONTEXT + nonce + their_fp, their_proof):
        raise NotAuthorized(f"{entry.label} failed the key proof")
    return entry.peer


# --- node -------------------------------------------------------------------

Watcher = Callable[[Action], None]


class Node:
    """
    An engine bound to the network.  With a listen address it is a full
    daemon; without one it is a temporary peer (the admin tool) that only
    dials out.
    """

    def __init__(self, keypair: KeyPair, peerlist: Peerlist, store: DocumentDatabase,
                 config: NodeConfig, listen: Optional[str] = None, tag_prefix: str = 'a'):
        self.keypair = keypair
        self.config = config
        self.listen = listen
        self.engine = ReplicationEngine(keypair, peerlist, store, config.engine_config())
        self.engine.state.tags = TagCounter(tag_prefix)
        self.connections: Dict[PeerId, Connection] = {}
        self.reply_routes: Dict[Tuple[PeerId, str], Connection] = {}
        self.watchers: List[Watcher] = []
        self.events: Optional[asyncio.Queue] = None
        self.server: Optional[asyncio.AbstractServer] = None
        self.tasks: List[asyncio.Task] = []
        self.stopping: Optional[asyncio.Event] = None
        self.helpers: List[PeerId] = []

    @property
    def peerlist(self) -> Peerlist:
        return self.engine.peerlist

    # --- lifecycle ----------------------------------------------------------

    async def start(self):
        self.events = asyncio.Queue()
        self.stopping = asyncio.Event()
        if self.listen:
            host, port = split_address(self.listen)
            try:
                self.server = await asyncio.start_server(self._accept, host, port)
            except OSError as e:
                raise BindFailure(f"cannot listen on {self.listen}: {e}")
            logger.info(f"Listening on {self.listen} as {self.peerlist.label(self.engine.self_id)}")
        self.tasks.append(asyncio.create_task(self._engine_loop()))
        self.tasks.append(asyncio.create_task(self._ticker()))

    async def stop(self):
        if self.stopping is not None:
            self.stopping.set()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        for conn in list(self.connections.values()):
            conn.close()
        self.connections.clear()
        for task in self.tasks:
            task.cancel()
        await asyncio.gather(*self.tasks, return_exceptions=True)
        self.tasks.clear()
        logger.info("Node stopped")

    async def serve_forever(self, reconcile_on_start: bool = True):
        await self.start()
        if reconcile_on_start:
            await self.submit(self._startup_reconcile)
        await self.stopping.wait()
        await self.stop()

    # --- engine queue -------------------------------------------------------

    async def submit(self, call: Callable[[], Tuple[object, List[Action]]]):
        """Run call on the engine queue; call returns (result, actions)"""
        future = asyncio.get_running_loop().create_future()
        await self.events.put((call, future))
        return await future

    def _enqueue(self, call: Callable[[], Tuple[object, List[Action]]]):
        self.events.put_nowait((call, None))

    async def _engine_loop(self):
        while True:
            call, future = await self.events.get()
            try:
                result, actions = call()
            except DdnfsError as e:
                if future is not None and not future.done():
                    future.set_exception(e)
                else:
                    logger.warning(f"Engine call failed: {describe(e)}")
                continue
            except Exception as e:
                logger.exception(f"Engine call crashed: {e}")
                if future is not None and not future.done():
                    future.set_exception(e)
                continue
            self.dispatch(actions)
            if future is not None and not future.done():
                future.set_result(result)

    def dispatch(self, actions: List[Action]):
        for action in actions:
            if isinstance(action, Send):
                self._route(action)
            else:
                for watcher in list(self.watchers):
                    watcher(action)

    async def _ticker(self):
        while True:
            await asyncio.sleep(self.config.tick_seconds)
            self._enqueue(lambda: (None, self.engine.tick(time.time())))
            self._reap_idle()

    def _startup_reconcile(self):
        self.helpers = [p for p in self.peerlist.group() if p != self.engine.self_id]
        random.shuffle(self.helpers)
        self.watchers.append(self._on_reconcile)
        return None, self._next_reconcile()

    def _next_reconcile(self) -> List[Action]:
        while self.helpers:
            helper = self.helpers.pop()
            try:
                return self.engine.reconcile(helper, time.time())
            except DdnfsError as e:
                logger.info(f"Skipping reconcile helper: {describe(e)}")
        logger.warning("No peer answered the startup reconcile")
        return []

    def _on_reconcile(self, action: Action):
        if not isinstance(action, ReconcileCompleted):
            return
        if action.error is None:
            self.helpers = []
            self.watchers.remove(self._on_reconcile)
        elif self.helpers:
            self._enqueue(lambda: (None, self._next_reconcile()))

    # --- network ------------------------------------------------------------

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            peer = await asyncio.wait_for(handshake(reader, writer, self.keypair, self.peerlist),
                                          self.config.request_timeout)
        except (DdnfsError, asyncio.TimeoutError, ConnectionError) as e:
            logger.info(f"Rejected inbound connection: {describe(e) if isinstance(e, DdnfsError) else e!r}")
            writer.close()
            return
        conn = Connection(peer, inbound=True)
        conn.reader, conn.writer = reader, writer
        old = self.connections.get(peer)
        self.connections[peer] = conn
        if old is not None and old.inbound:
            old.close()
        logger.debug(f"Accepted {self.peerlist.label(peer)}")
        self._start_io(conn)

    def _start_io(self, conn: Connection):
        conn.tasks.append(asyncio.create_task(self._read_loop(conn)))
        conn.tasks.append(asyncio.create_task(self._write_loop(conn)))

    async def _dial(self, conn: Connection):
        entry = self.peerlist.entry(conn.peer)
        try:
            host, port = split_address(entry.address)
            reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port),
                                                    self.config.request_timeout)
            peer = await asyncio.wait_for(handshake(reader, writer, self.keypair, self.peerlist),
                                          self.config.request_timeout)
        except (DdnfsError, OSError, asyncio.TimeoutError) as e:
            logger.info(f"Cannot reach {entry.label}: {describe(e) if isinstance(e, DdnfsError) else e!r}")
            self._drop(conn)
            return
        if peer != conn.peer:
            logger.warning(f"{entry.address} answered as {self.peerlist.label(peer)}, expected {entry.label}")
            writer.close()
            self._drop(conn)
            return
        conn.reader, conn.writer = reader, writer
        conn.touch()
        self._start_io(conn)

    def _drop(self, conn: Connection):
        conn.close()
        if self.connections.get(conn.peer) is conn:
            del self.connections[conn.peer]

    def _open(self, peer: PeerId) -> Optional[Connection]:
        entry = self.peerlist.entry(peer)
        if entry is None or entry.address == '-':
            logger.debug(f"No address to dial {peer.short()}")
            return None
        conn = Connection(peer, inbound=False)
        self.connections[peer] = conn
        conn.tasks.append(asyncio.create_task(self._dial(conn)))
        return conn

    def _route(self, send: Send):
        conn = None
        if isinstance(send.message, (GetAnswer, HeadAnswer)):
            conn = self.reply_routes.pop((send.to, send.tag), None)
        if conn is None or conn.closed:
            conn = self.connections.get(send.to)
        if conn is None or conn.closed:
            conn = self._open(send.to)
        if conn is None:
            return
        logger.debug(f"-> {self.peerlist.label(send.to)} {describe_frame(send.tag, send.message)}")
        conn.outbox.put_nowait(encode(send.tag, send.message))

    async def _write_loop(self, conn: Connection):
        try:
            while True:
                data = await conn.outbox.get()
                conn.writer.write(data)
                await conn.writer.drain()
                conn.touch()
        except (ConnectionError, OSError) as e:
            logger.debug(f"Write to {self.peerlist.label(conn.peer)} failed: {e!r}")
            self._drop(conn)

    async def _read_loop(self, conn: Connection):
        decoder = Decoder()
        try:
            while True:
                chunk = await conn.reader.read(READ_CHUNK)
                if not chunk:
                    break
                conn.touch()
                for tag, message in decoder.feed(chunk):
                    self._received(conn, tag, message)
        except (Malformed, OversizeBody, BodyLengthMismatch) as e:
            logger.warning(f"Protocol violation from {self.peerlist.label(conn.peer)}: {describe(e)}")
        except (ConnectionError, OSError) as e:
            logger.debug(f"Read from {self.peerlist.label(conn.peer)} failed: {e!r}")
        finally:
            self._drop(conn)

    def _received(self, conn: Connection, tag: str, message: Message):
        logger.debug(f"<- {self.peerlist.label(conn.peer)} {describe_frame(tag, message)}")
        if is_request(message):
            self.reply_routes[(conn.peer, tag)] = conn
        peer = conn.peer
        self._enqueue(lambda: (None, self.engine.handle_message(peer, tag, message, time.time())))

    def _reap_idle(self):
        cutoff = time.monotonic() - self.config.idle_timeout
        for peer, conn in list(self.connections.items()):
            if conn.last_used < cutoff and conn.outbox.empty():
                logger.debug(f"Closing idle connection to {self.peerlist.label(peer)}")
                self._drop(conn)
        for key, conn in list(self.reply_routes.items()):
            if conn.closed:
                del self.reply_routes[key]

    # --- waiting on outcomes ------------------------------------------------

    async def wait_for(self, predicate: Callable[[Action], bool], timeout: float) -> Optional[Action]:
        """First action satisfying predicate, or None after timeout"""
        future = asyncio.get_running_loop().create_future()

        def watcher(action: Action):
            if not future.done() and predicate(action):
                future.set_result(action)

        self.watchers.append(watcher)
        try:
            return await asyncio.wait_for(future, timeout)
        except asyncio.TimeoutError:
            return None
        finally:
            self.watchers.remove(watcher)

    async def run_command(self, call: Callable[[], Tuple[object, List[Action]]],
                          predicate: Callable[[Action], bool], timeout: float) -> Tuple[object, Optional[Action]]:
        """Submit a local command and wait for the action that completes it"""
        future = asyncio.get_running_loop().create_future()

        def watcher(action: Action):
            if not future.done() and predicate(action):
                future.set_result(action)

        self.watchers.append(watcher)
        try:
            result = await self.submit(call)
            try:
                outcome = await asyncio.wait_for(future, timeout)
            except asyncio.TimeoutError:
                outcome = None
            return result, outcome
        finally:
            self.watchers.remove(watcher)

    async def settle(self, quiet: float, limit: float):
        """Keep serving until the engine has been idle for quiet seconds (or limit passes)"""
        deadline = time.monotonic() + limit
        idle_since = None
        while time.monotonic() < deadline:
            busy = await self.submit(lambda: (not self.engine.is_idle() or bool(self.engine.state.acquisitions), []))
            recent = any(time.monotonic() - c.last_used < quiet for c in self.connections.values())
            if busy or recent:
                idle_since = None
            elif idle_since is None:
                idle_since = time.monotonic()
            elif time.monotonic() - idle_since >= quiet:
                return
            await asyncio.sleep(min(0.1, quiet / 2))


# --- entry points -----------------------------------------------------------

def open_node(config: NodeConfig, listen: bool = True, tag_prefix: str = 'a') -> Node:
    """Load keys, peerlist and store; check the listen address against the peerlist"""
    keypair = load_keypair(config.key_file)
    peerlist = load_peerlist_file(config.peerlist_file)
    entry = peerlist.entry(keypair.peer_id())
    if entry is None:
        raise BadPeerlist(f"key {keypair.peer_id().short()} is not listed in {config.peerlist_file}")
    address = None
    if listen:
        if entry.address == '-':
            raise BadPeerlist(f"{entry.label} has no address in the peerlist and cannot listen")
        if config.listen and config.listen != entry.address:
            raise BadPeerlist(f"listen address {config.listen} differs from peerlist entry {entry.address}")
        address = config.listen or entry.address
    store = DocumentDatabase(config.store_dir) if config.store_dir else DocumentDatabase()
    return Node(keypair, peerlist, store, config, listen=address, tag_prefix=tag_prefix)


def run_daemon(config: NodeConfig):
    """Blocking daemon entry point; SIGTERM and SIGINT stop it cleanly"""
    node = open_node(config, listen=True)

    async def main():
        loop = asyncio.get_running_loop()
        stop = lambda: node.stopping.set() if node.stopping else None  # noqa: E731
        for sig in (signal.SIGTERM, signal.SIGINT):
            try:
                loop.add_signal_handler(sig, stop)
            except (NotImplementedError, RuntimeError):
                pass
        await node.serve_forever()

    asyncio.run(main())


def run_session(node: Node, work: Callable[[Node], Awaitable[object]]):
    """Run one admin-tool exchange as a temporary peer and return its result"""
    async def main():
        await node.start()
        try:
            return await work(node)
        finally:
            await node.stop()

    return asyncio.run(main())


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="ddnfs peer daemon")
    parser.add_argument('config', help="node config file (key=value)")
    args = parser.parse_args()
    logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO), format=LOG_FORMAT)
    try:
        run_daemon(load_node_config(args.config))
    except DdnfsError as e:
        logger.error(describe(e))
        raise SystemExit(1)
