"""
Peerlist and policy: group membership, administrator roster, per-namespace
author restrictions and activeness expressions.

Policy text grammar (line-oriented, '#' starts a comment):

    path <glob> { authors: <idlist|any>; active: <expr>; }
    <expr> := atom | <expr> and <expr> | <expr> or <expr> | ( <expr> )
    atom   := signed(<id>) | quorum(<int>, {<idlist>}) | admin(<id>)

'and' binds tighter than 'or'.  'not' is rejected so that activation is
monotone in the signatures a document acquires.
"""

import base64
import binascii
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from documents import Document, path_match, validate_pattern
from errors import (BadPattern, InvalidPattern, NotAdmin, PeerlistParseError, PolicySyntaxError,
                    UnknownPeerRef, VersionNotNewer, DdnfsError)
from identity import PeerId, Role, fingerprint
from signatures import SignatureBlock

try:
    from config import PEERLIST_HEADER, PEERLIST_PATH
except ImportError:
    PEERLIST_HEADER = "ddnfs-peerlist v1"
    PEERLIST_PATH = "/peerlist"

logger = logging.getLogger(__name__)

Resolver = Callable[[str], PeerId]
Namer = Callable[[PeerId], str]


def _hex_name(peer: PeerId) -> str:
    return peer.hex


# --- activeness expressions -------------------------------------------------

class Expr:
    def evaluate(self, signers: FrozenSet[PeerId]) -> bool:
        raise NotImplementedError

    def explain(self, signers: FrozenSet[PeerId], name: Namer = _hex_name) -> List[str]:
        """One line per atom, e.g. 'quorum(3, {P1,P2,P3,P4}): 2/3 -> false'"""
        raise NotImplementedError

    def format(self, name: Namer = _hex_name) -> str:
        raise NotImplementedError

    def peers(self) -> FrozenSet[PeerId]:
        raise NotImplementedError


def _verdict(value: bool) -> str:
    return 'true' if value else 'false'


@dataclass(frozen=True)
class Signed(Expr):
    peer: PeerId

    def evaluate(self, signers):
        return self.peer in signers

    def explain(self, signers, name=_hex_name):
        return [f"{self.format(name)}: {_verdict(self.evaluate(signers))}"]

    def format(self, name=_hex_name):
        return f"signed({name(self.peer)})"

    def peers(self):
        return frozenset([self.peer])


@dataclass(frozen=True)
class Quorum(Expr):
    k: int
    members: Tuple[PeerId, ...]

    def __post_init__(self):
        object.__setattr__(self, 'members', tuple(sorted(set(self.members))))

    def count(self, signers) -> int:
        return sum(1 for p in self.members if p in signers)

    def evaluate(self, signers):
        return self.count(signers) >= self.k

    def explain(self, signers, name=_hex_name):
        return [f"{self.format(name)}: {self.count(signers)}/{self.k} -> {_verdict(self.evaluate(signers))}"]

    def format(self, name=_hex_name):
        return f"quorum({self.k}, {{{','.join(name(p) for p in self.members)}}})"

    def peers(self):
        return frozenset(self.members)


@dataclass(frozen=True)
class AdminSigned(Expr):
    admin: PeerId

    def evaluate(self, signers):
        return self.admin in signers

    def explain(self, signers, name=_hex_name):
        return [f"{self.format(name)}: {_verdict(self.evaluate(signers))}"]

    def format(self, name=_hex_name):
        return f"admin({name(self.admin)})"

    def peers(self):
        return frozenset([self.admin])


@dataclass(frozen=True)
class And(Expr):
    left: Expr
    right: Expr

    def evaluate(self, signers):
        return self.left.evaluate(signers) and self.right.evaluate(signers)

    def explain(self, signers, name=_hex_name):
        return self.left.explain(signers, name) + self.right.explain(signers, name)

    def format(self, name=_hex_name):
        return f"{_wrap(self.left, name, Or)} and {_wrap(self.right, name, Or)}"

    def peers(self):
        return self.left.peers() | self.right.peers()


@dataclass(frozen=True)
class Or(Expr):
    left: Expr
    right: Expr

    def evaluate(self, signers):
        return self.left.evaluate(signers) or self.right.evaluate(signers)

    def explain(self, signers, name=_hex_name):
        return self.left.explain(signers, name) + self.right.explain(signers, name)

    def format(self, name=_hex_name):
        return f"{self.left.format(name)} or {self.right.format(name)}"

    def peers(self):
        return self.left.peers() | self.right.peers()


def _wrap(expr: Expr, name: Namer, loose: type) -> str:
    text = expr.format(name)
    return f"({text})" if isinstance(expr, loose) else text


@dataclass(frozen=True)
class PolicyRule:
    pattern: str
    authors: Optional[FrozenSet[PeerId]]  # None means any author
    activeness: Expr
    default: bool = False

    def allows_author(self, originator: PeerId) -> bool:
        return self.authors is None or originator in self.authors

    def format(self, name: Namer = _hex_name) -> str:
        authors = 'any' if self.authors is None else ', '.join(name(p) for p in sorted(self.authors))
        return f"path {self.pattern} {{ authors: {authors}; active: {self.activeness.format(name)}; }}"


def default_rule(group: Sequence[PeerId]) -> PolicyRule:
    """Any author; active once a strict majority of the group has signed"""
    members = tuple(group)
    k = len(members) // 2 + 1
    return PolicyRule('/**', None, Quorum(k, members), default=True)


# --- policy text parser -----------------------------------------------------

_TOKEN_RE = re.compile(
    r'(?P<space>[ \t\r]+)|(?P<newline>\n)|(?P<comment>#[^\n]*)'
    r'|(?P<glob>/[^\s{};]*)|(?P<word>[A-Za-z0-9_.\-]+)|(?P<punct>[{}();:,])'
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    line = 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise PolicySyntaxError(line, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind == 'newline':
            line += 1
        elif kind not in ('space', 'comment'):
            tokens.append(_Token(kind, m.group(), line))
        pos = m.end()
    return tokens


class _PolicyParser:
    def __init__(self, text: str, resolve: Resolver):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.resolve = resolve

    def _peek(self) -> Optional[_Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _line(self) -> int:
        token = self._peek()
        if token is not None:
            return token.line
        return self.tokens[-1].line if self.tokens else 1

    def _next(self, what: str) -> _Token:
        token = self._peek()
        if token is None:
            raise PolicySyntaxError(self._line(), f"unexpected end of policy, expected {what}")
        self.pos += 1
        return token

    def _expect(self, text: str):
        token = self._next(repr(text))
        if token.text != text:
            raise PolicySyntaxError(token.line, f"expected {text!r}, found {token.text!r}")

    def _accept(self, text: str) -> bool:
        token = self._peek()
        if token is not None and token.text == text:
            self.pos += 1
            return True
        return False

    def _id(self) -> PeerId:
        token = self._next("peer id")
        if token.kind != 'word':
            raise PolicySyntaxError(token.line, f"expected peer id, found {token.text!r}")
        return self.resolve(token.text)

    def _idlist(self) -> List[PeerId]:
        ids = [self._id()]
        while self._accept(','):
            ids.append(self._id())
        return ids

    def parse(self) -> List[PolicyRule]:
        rules = []
        while self._peek() is not None:
            rules.append(self._rule())
        return rules

    def _rule(self) -> PolicyRule:
        self._expect('path')
        token = self._next("path glob")
        if token.kind != 'glob':
            raise PolicySyntaxError(token.line, f"expected path glob, found {token.text!r}")
        try:
            validate_pattern(token.text)
        except InvalidPattern as e:
            raise BadPattern(f"line {token.line}: {e}")
        pattern = token.text

        self._expect('{')
        authors: Optional[FrozenSet[PeerId]] = None
        activeness: Optional[Expr] = None
        seen = set()
        while not self._accept('}'):
            key = self._next("'authors', 'active' or '}'")
            if key.text not in ('authors', 'active') or key.text in seen:
                raise PolicySyntaxError(key.line, f"unexpected clause {key.text!r}")
            seen.add(key.text)
            self._expect(':')
            if key.text == 'authors':
                if not self._accept('any'):
                    authors = frozenset(self._idlist())
            else:
                activeness = self._expr()
            self._expect(';')

        if 'active' not in seen or activeness is None:
            raise PolicySyntaxError(token.line, f"rule for {pattern} lacks an 'active' clause")
        if 'authors' not in seen:
            raise PolicySyntaxError(token.line, f"rule for {pattern} lacks an 'authors' clause")
        return PolicyRule(pattern, authors, activeness)

    def _expr(self) -> Expr:
        left = self._and()
        while self._accept('or'):
            left = Or(left, self._and())
        return left

    def _and(self) -> Expr:
        left = self._factor()
        while self._accept('and'):
            left = And(left, self._factor())
        return left

    def _factor(self) -> Expr:
        token = self._next("expression")
        if token.text == '(':
            inner = self._expr()
            self._expect(')')
            return inner
        if token.text == 'not':
            raise PolicySyntaxError(token.line, "'not' is not allowed in activeness expressions")
        if token.text == 'signed':
            self._expect('(')
            peer = self._id()
            self._expect(')')
            return Signed(peer)
        if token.text == 'admin':
            self._expect('(')
            peer = self._id()
            self._expect(')')
            if peer.role != Role.ADMIN:
                raise UnknownPeerRef(f"line {token.line}: {peer.short()} is not an administrator")
            return AdminSigned(peer)
        if token.text == 'quorum':
            self._expect('(')
            count = self._next("quorum size")
            if not count.text.isdigit():
                raise PolicySyntaxError(count.line, f"quorum size must be an integer, found {count.text!r}")
            self._expect(',')
            self._expect('{')
            members = self._idlist()
            self._expect('}')
            self._expect(')')
            k = int(count.text)
            if k < 1 or k > len(set(members)):
                raise PolicySyntaxError(count.line, f"quorum size {k} outside 1..{len(set(members))}")
            return Quorum(k, tuple(members))
        raise PolicySyntaxError(token.line, f"unexpected {token.text!r} in expression")


def _resolve_hex(token: str) -> PeerId:
    try:
        return PeerId(bytes.fromhex(token))
    except (ValueError, DdnfsError):
        raise UnknownPeerRef(f"unknown peer {token!r}")


def parse_policy(text: str, resolve: Optional[Resolver] = None) -> List[PolicyRule]:
    """Rules in file order; ids resolve through the peerlist when given"""
    return _PolicyParser(text, resolve or _resolve_hex).parse()


def format_policy(rules: Iterable[PolicyRule], name: Namer = _hex_name) -> str:
    return '\n'.join(rule.format(name) for rule in rules if not rule.default)


def match_rule(rules: Sequence[PolicyRule], path: str, group: Sequence[PeerId]) -> PolicyRule:
    """First matching rule, else the majority default"""
    for rule in rules:
        if path_match(rule.pattern, path):
            return rule
    return default_rule(group)


def authorized_author(rules: Sequence[PolicyRule], path: str, originator: PeerId,
                      group: Sequence[PeerId] = ()) -> bool:
    return match_rule(rules, path, group).allows_author(originator)


def is_active(rules: Sequence[PolicyRule], path: str, block: SignatureBlock,
              group: Sequence[PeerId]) -> bool:
    return match_rule(rules, path, group).activeness.evaluate(block.signers)


# --- peerlist ---------------------------------------------------------------

@dataclass(frozen=True)
class PeerEntry:
    peer: PeerId
    public_key: bytes
    address: str
    role: Role
    name: Optional[str] = None

    @property
    def label(self) -> str:
        return self.name or self.peer.short()

    def host_port(self) -> Tuple[str, int]:
        host, port = self.address.rsplit(':', 1)
        return host, int(port)


_ADDRESS_RE = re.compile(r'^[^\s:]+:(\d{1,5})$|^\[[0-9a-fA-F:]+\]:(\d{1,5})$')


def _valid_address(address: str) -> bool:
    m = _ADDRESS_RE.match(address)
    if not m:
        return False
    port = int(m.group(1) or m.group(2))
    return 0 <= port <= 65535


@dataclass
class Peerlist:
    version: int
    peers: Dict[PeerId, PeerEntry]
    rules: Tuple[PolicyRule, ...] = ()
    policy_text: str = ''
    _by_name: Dict[str, PeerId] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_name = {e.name: e.peer for e in self.peers.values() if e.name}

    def directory(self) -> Dict[PeerId, bytes]:
        return {pid: e.public_key for pid, e in self.peers.items()}

    def roles(self) -> Dict[PeerId, Role]:
        return {pid: e.role for pid, e in self.peers.items()}

    def group(self) -> List[PeerId]:
        """Ordinary peers (the replication group), in fingerprint order"""
        return sorted(e.peer for e in self.peers.values() if e.role == Role.PEER)

    def admins(self) -> List[PeerId]:
        return sorted(e.peer for e in self.peers.values() if e.role == Role.ADMIN)

    def entry(self, peer: PeerId) -> Optional[PeerEntry]:
        return self.peers.get(peer)

    def role_of(self, peer: PeerId) -> Optional[Role]:
        e = self.peers.get(peer)
        return e.role if e else None

    def peer_id(self, peer: PeerId) -> PeerId:
        """The same identity carrying the role recorded here"""
        e = self.peers.get(peer)
        return e.peer if e else peer

    def name_of(self, peer: PeerId) -> str:
        e = self.peers.get(peer)
        return e.name if e and e.name else peer.hex

    def label(self, peer: PeerId) -> str:
        e = self.peers.get(peer)
        return e.label if e else peer.short()

    def resolve(self, token: str) -> PeerId:
        """Peer by alias name, or by fingerprint hex (a unique prefix of at least 8 digits)"""
        if token in self._by_name:
            return self._by_name[token]
        lowered = token.lower()
        if len(lowered) >= 8 and all(c in '0123456789abcdef' for c in lowered):
            matches = [pid for pid in self.peers if pid.hex.startswith(lowered)]
            if len(matches) == 1:
                return self.peers[matches[0]].peer
        raise UnknownPeerRef(f"unknown peer {token!r}")

    def match_rule(self, path: str) -> PolicyRule:
        return match_rule(self.rules, path, self.group())

    def authorized_author(self, path: str, originator: PeerId) -> bool:
        return self.match_rule(path).allows_author(originator)

    def is_active(self, path: str, block: SignatureBlock) -> bool:
        return self.match_rule(path).activeness.evaluate(block.signers)

    def activeness_trace(self, path: str, block: SignatureBlock) -> List[str]:
        rule = self.match_rule(path)
        source = 'default majority' if rule.default else f"rule {rule.pattern}"
        lines = [f"policy: {source}"]
        lines.extend(rule.activeness.explain(block.signers, self.name_of))
        lines.append(f"active: {_verdict(rule.activeness.evaluate(block.signers))}")
        return lines

    def encode(self) -> bytes:
        return make_peerlist_body(self.peers.values(), self.policy_text)


def make_peerlist_body(entries: Iterable[PeerEntry], policy_text: str) -> bytes:
    lines = [PEERLIST_HEADER]
    for e in sorted(entries, key=lambda e: e.peer.fingerprint):
        line = f"peer {e.peer.hex} {e.role.value} {e.address} {base64.b64encode(e.public_key).decode('ascii')}"
        if e.name:
            line += f" {e.name}"
        lines.append(line)
    lines.append("policy:")
    if policy_text:
        lines.append(policy_text.rstrip('\n'))
    return ('\n'.join(lines) + '\n').encode('utf-8')


def parse_peerlist(body: bytes, version: int = 0) -> Peerlist:
    """Parse a peerlist document body; policy ids resolve against its own peers"""
    try:
        text = body.decode('utf-8')
    except UnicodeDecodeError as e:
        raise PeerlistParseError(f"peerlist is not UTF-8: {e}")

    lines = text.split('\n')
    index = 0
    while index < len(lines) and not lines[index].strip():
        index += 1
    if index >= len(lines) or lines[index].strip() != PEERLIST_HEADER:
        raise PeerlistParseError(f"missing header {PEERLIST_HEADER!r}")
    index += 1

    peers: Dict[PeerId, PeerEntry] = {}
    names = set()
    policy_start = None
    for lineno in range(index, len(lines)):
        line = lines[lineno].strip()
        if not line or line.startswith('#'):
            continue
        if line == 'policy:':
            policy_start = lineno + 1
            break
        fields = line.split()
        if fields[0] != 'peer' or len(fields) not in (5, 6):
            raise PeerlistParseError(f"line {lineno + 1}: expected 'peer <fp> <role> <host:port> <pubkey> [name]'")
        _, fp_hex, role_text, address, key_b64 = fields[:5]
        name = fields[5] if len(fields) == 6 else None
        try:
            role = Role(role_text)
        except ValueError:
            raise PeerlistParseError(f"line {lineno + 1}: unknown role {role_text!r}")
        try:
            public_key = base64.b64decode(key_b64, validate=True)
        except (binascii.Error, ValueError):
            raise PeerlistParseError(f"line {lineno + 1}: public key is not base64")
        if len(public_key) != 32:
            raise PeerlistParseError(f"line {lineno + 1}: public key must be 32 bytes")
        if fingerprint(public_key).hex() != fp_hex.lower():
            raise PeerlistParseError(f"line {lineno + 1}: fingerprint does not match public key")
        if not _valid_address(address) and not (role == Role.ADMIN and address == '-'):
            raise PeerlistParseError(f"line {lineno + 1}: bad address {address!r}")
        peer = PeerId(fingerprint(public_key), role)
        if peer in peers:
            raise PeerlistParseError(f"line {lineno + 1}: duplicate peer {peer.short()}")
        if name is not None:
            if name in names or name in ('any', 'and', 'or', 'not'):
                raise PeerlistParseError(f"line {lineno + 1}: bad or duplicate name {name!r}")
            names.add(name)
        peers[peer] = PeerEntry(peer, public_key, address, role, name)

    if policy_start is None:
        raise PeerlistParseError("missing 'policy:' section")
    if not any(e.role == Role.PEER for e in peers.values()):
        raise PeerlistParseError("peerlist names no ordinary peer")

    policy_text = '\n'.join(lines[policy_start:]).strip('\n')
    peerlist = Peerlist(version, peers, (), policy_text)
    peerlist.rules = tuple(parse_policy(policy_text, peerlist.resolve))
    return peerlist


def validate_peerlist_update(current: Peerlist, candidate: Document,
                             block: SignatureBlock) -> Peerlist:
    """
    Judge a peerlist update against the current list, never against the
    candidate itself.  Returns the parsed candidate.
    """
    if candidate.path != PEERLIST_PATH:
        raise PeerlistParseError(f"peerlist updates live at {PEERLIST_PATH}, not {candidate.path}")
    originator = block.originator
    if originator is None or current.role_of(originator) != Role.ADMIN:
        raise NotAdmin(f"peerlist v{candidate.version} not originated by an administrator")
    if candidate.version <= current.version:
        raise VersionNotNewer(f"peerlist v{candidate.version} is not newer than v{current.version}")
    try:
        return parse_peerlist(candidate.content, candidate.version)
    except (PolicySyntaxError, UnknownPeerRef, BadPattern) as e:
        raise PeerlistParseError(str(e))
