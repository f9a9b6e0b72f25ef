#!/usr/bin/env python3
"""
ddnfs admin tool.

Key and peerlist management, and a "temporary peer" that connects to the
group for one exchange (inject, get, head, reconcile, countersign) and then
disconnects.  Also starts the peer daemon and the simulator.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import List, Optional

from daemon import Node, NodeConfig, load_node_config, load_peerlist_file, open_node, run_daemon, run_session
from database import DocumentDatabase
from documents import DocumentId, Selector, parse_version_sel
from engine import FetchCompleted, HeadCompleted, ReconcileCompleted
from errors import ConfigError, DdnfsError, HelperUnreachable, NotAdmin, describe
from identity import PeerId, Role, fingerprint, generate_keypair, load_keypair, load_public_key, save_keypair
from policy import PeerEntry, make_peerlist_body, parse_peerlist

try:
    from config import LOG_FORMAT, LOG_LEVEL, PEERLIST_PATH
except ImportError:
    LOG_LEVEL = 'INFO'
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    PEERLIST_PATH = "/peerlist"

logger = logging.getLogger(__name__)


# --- local commands ---------------------------------------------------------

def cmd_keygen(args):
    seed = bytes.fromhex(args.seed) if args.seed else None
    kp = generate_keypair(seed)
    save_keypair(args.out, kp)
    print(f"✅ Key written to {args.out}")
    print(f"   fingerprint {kp.peer_id().hex}")
    return 0


def _entry(spec: str, role: Role) -> PeerEntry:
    """name:keyfile[:address] where keyfile is a private key or a .pub file"""
    parts = spec.split(':', 2)
    if len(parts) < 2 or (role == Role.PEER and len(parts) != 3):
        raise ConfigError(f"bad entry {spec!r}; expected name:keyfile{':host:port' if role == Role.PEER else ''}")
    name, key_file = parts[0], parts[1]
    address = parts[2] if len(parts) == 3 else '-'
    public = load_public_key(key_file) if key_file.endswith('.pub') else load_keypair(key_file).public
    return PeerEntry(PeerId(fingerprint(public), role), public, address, role, name)


def cmd_peerlist_make(args):
    entries = [_entry(spec, Role.PEER) for spec in args.peer]
    entries += [_entry(spec, Role.ADMIN) for spec in args.admin or []]
    policy_text = ''
    if args.policy:
        with open(args.policy, 'r', encoding='utf-8') as f:
            policy_text = f.read()
    body = make_peerlist_body(entries, policy_text)
    peerlist = parse_peerlist(body, 0)
    with open(args.out, 'wb') as f:
        f.write(body)
    print(f"✅ Peerlist with {len(peerlist.group())} peers and {len(peerlist.admins())} administrators "
          f"written to {args.out}")
    return 0


def cmd_status(args):
    config = _node_config(args)
    if not config.store_dir:
        raise ConfigError("status needs a store directory (--store or store_dir in the config)")
    peerlist = load_peerlist_file(config.peerlist_file)
    store = DocumentDatabase(config.store_dir)
    selector = parse_version_sel(args.version) if args.version else Selector.ANY
    print(store.status_report(args.path, selector, peerlist))
    return 0


def cmd_blacklist_show(args):
    config = _node_config(args)
    if not config.store_dir:
        raise ConfigError("blacklist-show needs a store directory")
    peerlist = load_peerlist_file(config.peerlist_file)
    entries = DocumentDatabase(config.store_dir).load_state('blacklist', {}) or {}
    if not entries:
        print("No blacklisted peers")
        return 0
    for hex_id, entry in sorted(entries.items()):
        label = peerlist.label(PeerId.from_hex(hex_id))
        evidence = ' (evidence stored)' if entry.get('evidence') else ''
        since = time.strftime('%Y-%m-%d %H:%M:%S', time.localtime(entry['since']))
        print(f"❌ {label} {hex_id[:16]}  since {since}: {entry['reason']}{evidence}")
    return 0


def cmd_daemon(args):
    run_daemon(load_node_config(args.node_config))
    return 0


def cmd_simulate(args):
    from charts import create_coverage_chart, create_messages_chart
    from metrics_processor import SimulationMetricsProcessor
    from scenarios import builtin, load_scenario, run_scenario, Scenario

    if args.scenario:
        scenario = load_scenario(args.scenario)
    else:
        scenario = Scenario(builtin(args.builtin or 'honest', args.seed))
    if args.trace:
        scenario.config.trace = True
    seeds = range(args.seed, args.seed + args.seeds)
    results = run_scenario(scenario, seeds)

    processor = SimulationMetricsProcessor()
    runs = {seed: result.metrics for seed, result in zip(seeds, results)}
    for seed, result in zip(seeds, results):
        print(f"--- seed {seed}: {result.render()}")
        print(result.metrics.summary())
    if len(results) > 1:
        print(processor.format_table(processor.compare_runs(runs).reset_index(),
                                     ['seed', 'documents', 'rounds', 'messages', 'mean_coverage']))
    if args.jsonl:
        with open(args.jsonl, 'w', encoding='utf-8') as f:
            for seed, metrics in runs.items():
                for record in metrics.to_records():
                    f.write(json.dumps({'seed': seed, **record}, sort_keys=True) + '\n')
        print(f"📄 Records written to {args.jsonl}")
    if args.trace:
        for line in results[0].metrics.trace:
            print(line)
    if args.plot:
        create_coverage_chart({f"seed {s}": m for s, m in runs.items()}, args.plot, scenario.config.label)
        base, ext = os.path.splitext(args.plot)
        create_messages_chart(results[0].metrics, f"{base}_messages{ext or '.png'}")
        print(f"📄 Charts written to {args.plot}")
    return 0 if all(r.passed for r in results) else 1


# --- temporary peer commands ------------------------------------------------

def _node_config(args) -> NodeConfig:
    if args.config:
        config = load_node_config(args.config)
    elif args.key and args.peerlist:
        config = NodeConfig(key_file=args.key, peerlist_file=args.peerlist, store_dir=None)
    else:
        raise ConfigError("give --config, or both --key and --peerlist")
    if args.key:
        config.key_file = args.key
    if args.peerlist:
        config.peerlist_file = args.peerlist
    if args.store is not None:
        config.store_dir = args.store or None
    elif not args.config:
        config.store_dir = None
    if args.timeout:
        config.request_timeout = args.timeout
    return config


def _temporary_peer(args) -> Node:
    return open_node(_node_config(args), listen=False, tag_prefix='c')


def _resolve(node: Node, names: Optional[List[str]]) -> Optional[List[PeerId]]:
    if not names:
        return None
    return [node.peerlist.resolve(name) for name in names]


def _self_target(node: Node) -> Optional[List[PeerId]]:
    """A peer key with an address means its own daemon is the first hop"""
    entry = node.peerlist.entry(node.engine.self_id)
    if entry is not None and entry.role == Role.PEER and entry.address != '-':
        return [node.engine.self_id]
    return None


def _head_peer(node: Node, via: Optional[List[PeerId]]) -> Optional[PeerId]:
    if via:
        return via[0]
    own = _self_target(node)
    if own:
        return own[0]
    group = node.peerlist.group()
    return group[0] if group else None


async def _learn_versions(node: Node, path: str, peer: Optional[PeerId]):
    """HEAD the path first so the injected version follows what the group holds"""
    if peer is None:
        return
    _, outcome = await node.run_command(
        lambda: (None, node.engine.head(peer, path, Selector.ANY, time.time())),
        lambda a: isinstance(a, HeadCompleted), node.config.request_timeout + 1)
    if outcome is None or outcome.status == 'timeout':
        logger.warning(f"{node.peerlist.label(peer)} did not answer HEAD {path}; using local version numbers")


def cmd_inject(args):
    with open(args.file, 'rb') as f:
        content = f.read()
    node = _temporary_peer(args)

    async def work(node: Node):
        targets = _resolve(node, args.via) or _self_target(node)
        await _learn_versions(node, args.path, _head_peer(node, targets))
        doc_id = await node.submit(
            lambda: node.engine.inject_document(args.path, content, time.time(), targets=targets))
        await node.settle(quiet=1.0, limit=node.config.request_timeout * 2)
        return doc_id

    doc_id = run_session(node, work)
    print(f"✅ Injected {doc_id}")
    return 0


def cmd_peerlist_sign(args):
    with open(args.file, 'rb') as f:
        body = f.read()
    node = _temporary_peer(args)
    if node.peerlist.role_of(node.engine.self_id) != Role.ADMIN:
        raise NotAdmin(f"{node.peerlist.label(node.engine.self_id)} is not an administrator")
    parse_peerlist(body, 0)

    async def work(node: Node):
        await _learn_versions(node, PEERLIST_PATH, _head_peer(node, _resolve(node, args.via)))
        doc_id = await node.submit(lambda: node.engine.inject_document(PEERLIST_PATH, body, time.time()))
        await node.settle(quiet=1.0, limit=node.config.request_timeout * 2)
        return doc_id

    doc_id = run_session(node, work)
    print(f"✅ Offered peerlist {doc_id}")
    return 0


async def _fetch(node: Node, path: str, selector, rogues: int, candidates: Optional[List[PeerId]]):
    timeout = node.config.request_timeout * 2 + 1
    _, outcome = await node.run_command(
        lambda: node.engine.fetch_redundant(path, selector, rogues, time.time(), candidates),
        lambda a: isinstance(a, FetchCompleted), timeout)
    if outcome is None:
        raise HelperUnreachable(f"no answer for {path} within {timeout:.0f}s")
    if outcome.error is not None:
        raise outcome.error
    return outcome


def cmd_get(args):
    node = _temporary_peer(args)
    selector = parse_version_sel(args.version)

    async def work(node: Node):
        return await _fetch(node, args.path, selector, args.rogues, _resolve(node, args.peer))

    outcome = run_session(node, work)
    document = outcome.document
    if args.output:
        with open(args.output, 'wb') as f:
            f.write(document.content)
        print(f"✅ {document.id} ({document.size} bytes, {len(outcome.block)} signatures) written to {args.output}")
    else:
        sys.stdout.buffer.write(document.content)
        sys.stdout.flush()
    return 0


def cmd_head(args):
    node = _temporary_peer(args)
    selector = parse_version_sel(args.version)

    async def work(node: Node):
        peer = _head_peer(node, _resolve(node, args.peer))
        if peer is None:
            raise HelperUnreachable("no peer to ask")
        _, outcome = await node.run_command(
            lambda: (None, node.engine.head(peer, args.pattern, selector, time.time())),
            lambda a: isinstance(a, HeadCompleted), node.config.request_timeout + 1)
        return outcome

    outcome = run_session(node, work)
    if outcome is None or outcome.status == 'timeout':
        raise HelperUnreachable(f"no answer to HEAD {args.pattern}")
    if outcome.status == 'denied':
        raise HelperUnreachable("listing denied")
    for ref, block in outcome.entries:
        active = node.peerlist.is_active(ref.path, block)
        print(f"📄 {ref.path} {ref.version} {ref.size} {ref.content_digest.hex()[:16]} "
              f"{len(block)} sigs{' active' if active else ''}")
    if outcome.status == 'truncated':
        print(f"... listing truncated; narrow {args.pattern}")
    return 0


def cmd_reconcile(args):
    node = _temporary_peer(args)

    async def work(node: Node):
        helper = node.peerlist.resolve(args.helper)
        _, outcome = await node.run_command(
            lambda: (None, node.engine.reconcile(helper, time.time())),
            lambda a: isinstance(a, ReconcileCompleted), node.config.request_timeout * 4)
        await node.settle(quiet=1.0, limit=node.config.request_timeout * 2)
        return outcome

    outcome = run_session(node, work)
    if outcome is None:
        raise HelperUnreachable(f"reconcile with {args.helper} did not finish")
    if outcome.error is not None:
        raise outcome.error
    print(f"✅ Reconciled with {args.helper}: {outcome.fetched} fetched, {outcome.offered} offered")
    return 0


def cmd_admin_sign(args):
    node = _temporary_peer(args)
    if node.peerlist.role_of(node.engine.self_id) != Role.ADMIN:
        raise NotAdmin(f"{node.peerlist.label(node.engine.self_id)} is not an administrator")
    doc_id = DocumentId(args.path, int(args.version))

    async def work(node: Node):
        outcome = await _fetch(node, doc_id.path, doc_id.version, args.rogues, _resolve(node, args.peer))
        await node.submit(lambda: (node.engine.adopt(outcome.document, outcome.block, time.time()), []))
        await node.submit(lambda: (None, node.engine.countersign(doc_id, time.time())))
        await node.settle(quiet=1.0, limit=node.config.request_timeout * 2)

    run_session(node, work)
    print(f"✅ Countersigned {doc_id} as {node.peerlist.label(node.engine.self_id)}")
    return 0


# --- argument parsing -------------------------------------------------------

def _peer_options(parser: argparse.ArgumentParser):
    parser.add_argument('--config', '-c', help='node config file (key=value)')
    parser.add_argument('--key', help='private key file')
    parser.add_argument('--peerlist', help='peerlist file')
    parser.add_argument('--store', help='store directory (default: in memory)')
    parser.add_argument('--timeout', type=float, help='request timeout in seconds')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='ddnfs: tamper-resistant replicated document store')
    parser.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('keygen', help='create a key pair')
    p.add_argument('out', help='private key file (public key goes to <out>.pub)')
    p.add_argument('--seed', help='hex seed of at least 32 bytes (deterministic key)')
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser('peerlist-make', help='write a bootstrap peerlist')
    p.add_argument('out')
    p.add_argument('--peer', action='append', required=True, help='name:keyfile:host:port (repeatable)')
    p.add_argument('--admin', action='append', help='name:keyfile (repeatable)')
    p.add_argument('--policy', help='policy text file')
    p.set_defaults(func=cmd_peerlist_make)

    p = sub.add_parser('peerlist-sign', help='offer a new peerlist version (administrator key)')
    p.add_argument('file')
    p.add_argument('--via', action='append', help='peer to ask for the current version')
    _peer_options(p)
    p.set_defaults(func=cmd_peerlist_sign)

    p = sub.add_parser('inject', help='originate a document')
    p.add_argument('path')
    p.add_argument('file')
    p.add_argument('--via', action='append', help='first peers to offer to (repeatable)')
    _peer_options(p)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser('get', help='fetch a document from f+1 peers')
    p.add_argument('path')
    p.add_argument('version', nargs='?', default='@', help="version number, '@' (active) or '*' (newest)")
    p.add_argument('-f', '--rogues', type=int, default=0, help='rogue peers to tolerate')
    p.add_argument('-o', '--output', help='write content here instead of stdout')
    p.add_argument('--peer', action='append', help='ask these peers (repeatable)')
    _peer_options(p)
    p.set_defaults(func=cmd_get)

    p = sub.add_parser('head', help='list documents matching a pattern')
    p.add_argument('pattern')
    p.add_argument('version', nargs='?', default='*')
    p.add_argument('--peer', action='append')
    _peer_options(p)
    p.set_defaults(func=cmd_head)

    p = sub.add_parser('status', help='signatures and activeness of a stored document')
    p.add_argument('path')
    p.add_argument('version', nargs='?')
    _peer_options(p)
    p.set_defaults(func=cmd_status)

    p = sub.add_parser('reconcile', help='catch up with one peer')
    p.add_argument('helper')
    _peer_options(p)
    p.set_defaults(func=cmd_reconcile)

    p = sub.add_parser('blacklist-show', help='blacklisted peers and reasons')
    _peer_options(p)
    p.set_defaults(func=cmd_blacklist_show)

    p = sub.add_parser('admin-sign', help='countersign a document as administrator')
    p.add_argument('path')
    p.add_argument('version')
    p.add_argument('-f', '--rogues', type=int, default=0)
    p.add_argument('--peer', action='append')
    _peer_options(p)
    p.set_defaults(func=cmd_admin_sign)

    p = sub.add_parser('daemon', help='run a peer daemon')
    p.add_argument('node_config')
    p.set_defaults(func=cmd_daemon)

    p = sub.add_parser('simulate', help='run a simulated peer group')
    p.add_argument('scenario', nargs='?', help='scenario file')
    p.add_argument('--builtin', help='built-in scenario name')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--seeds', type=int, default=1, help='number of consecutive seeds')
    p.add_argument('--jsonl', help='write JSON-lines metrics records')
    p.add_argument('--plot', help='write a coverage chart (PNG)')
    p.add_argument('--trace', action='store_true', help='print the message trace')
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    level = logging.DEBUG if args.verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT)
    try:
        return args.func(args)
    except DdnfsError as e:
        print(f"❌ {describe(e)}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
