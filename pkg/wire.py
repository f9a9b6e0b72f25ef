"""
Wire protocol: five tagged message types over an authenticated byte stream.

Every frame starts with an ASCII header line '<tag> <VERB> <args...>\\r\\n';
signature blocks and document bodies follow as length-prefixed binary
sections.  All header integers are ASCII decimal, paths are
percent-encoded.
"""

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union
from urllib.parse import quote, unquote

from documents import (MAX_SIZE, DocRef, Selector, VersionSel, format_version_sel, parse_version_sel,
                       validate_path, validate_pattern, validate_version)
from errors import BodyLengthMismatch, DdnfsError, InvalidVersion, Malformed, NeedMoreData, OversizeBody
from signatures import SignatureBlock, decode_block, encode_block

try:
    from config import DIGEST_ALGO, MAX_BODY, MAX_HEADER, PROTOCOL_NAME, SIG_ALGO
except ImportError:
    PROTOCOL_NAME = "ddnfs/1"
    DIGEST_ALGO = "sha256"
    SIG_ALGO = "ed25519"
    MAX_BODY = 16 * 1024 * 1024
    MAX_HEADER = 8192

logger = logging.getLogger(__name__)

CRLF = b'\r\n'
TAG_RE = re.compile(r'^[a-z][0-9]+$')

GET_STATUSES = ('ok', 'notfound', 'denied')
HEAD_STATUSES = ('ok', 'truncated', 'denied')


@dataclass(frozen=True)
class Ihave:
    doc_ref: DocRef
    block: SignatureBlock

    def __post_init__(self):
        if self.block.doc_ref != self.doc_ref:
            raise ValueError("IHAVE block belongs to a different document")


@dataclass(frozen=True)
class Get:
    path: str
    version_sel: VersionSel


@dataclass(frozen=True)
class GetAnswer:
    status: str
    doc_ref: Optional[DocRef] = None
    block: Optional[SignatureBlock] = None
    body: Optional[bytes] = None

    def __post_init__(self):
        if self.status not in GET_STATUSES:
            raise ValueError(f"bad GETANSWER status {self.status!r}")
        if self.status == 'ok' and (self.doc_ref is None or self.block is None or self.body is None):
            raise ValueError("an ok GETANSWER carries reference, block and body")


@dataclass(frozen=True)
class Head:
    pattern: str
    version_sel: VersionSel


@dataclass(frozen=True)
class HeadAnswer:
    status: str
    entries: Tuple[Tuple[DocRef, SignatureBlock], ...] = ()

    def __post_init__(self):
        if self.status not in HEAD_STATUSES:
            raise ValueError(f"bad HEADANSWER status {self.status!r}")
        object.__setattr__(self, 'entries', tuple(self.entries))


Message = Union[Ihave, Get, GetAnswer, Head, HeadAnswer]

VERBS = {Ihave: 'IHAVE', Get: 'GET', GetAnswer: 'GETANSWER', Head: 'HEAD', HeadAnswer: 'HEADANSWER'}


def verb_of(message: Message) -> str:
    return VERBS[type(message)]


def is_request(message: Message) -> bool:
    """GET and HEAD expect an answer; IHAVE never does"""
    return isinstance(message, (Get, Head))


# --- tags -------------------------------------------------------------------

class TagCounter:
    """Strictly increasing tags for one connection direction"""

    def __init__(self, prefix: str = 'a'):
        if len(prefix) != 1 or not prefix.islower():
            raise ValueError("tag prefix must be one lowercase letter")
        self.prefix = prefix
        self.counter = 0

    def next(self) -> str:
        self.counter += 1
        return f"{self.prefix}{self.counter}"


def next_tag(counter: TagCounter) -> str:
    return counter.next()


def valid_tag(tag: str) -> bool:
    return bool(TAG_RE.match(tag))


# --- banner -----------------------------------------------------------------

def make_banner() -> bytes:
    return f"{PROTOCOL_NAME} {DIGEST_ALGO} {SIG_ALGO}".encode('ascii') + CRLF


def check_banner(line: bytes):
    """Raise Malformed unless the peer speaks the same protocol and algorithms"""
    if line.rstrip(CRLF) != make_banner().rstrip(CRLF):
        raise Malformed(line.decode('ascii', 'replace'), "banner mismatch")


# --- encoding ---------------------------------------------------------------

def _qpath(path: str) -> str:
    return quote(path, safe='/*')


def _ref_fields(ref: DocRef) -> str:
    return f"{_qpath(ref.path)} {ref.version} {ref.size} {ref.content_digest.hex()}"


def _check_size(data: bytes, max_body: int, what: str):
    if len(data) > max_body:
        raise OversizeBody(f"{what} of {len(data)} bytes exceeds cap {max_body}")


def encode(tag: str, message: Message, max_body: int = MAX_BODY) -> bytes:
    """Bit-exact frame for one message"""
    if not valid_tag(tag):
        raise ValueError(f"bad tag {tag!r}")

    if isinstance(message, Get):
        return f"{tag} GET {_qpath(message.path)} {format_version_sel(message.version_sel)}".encode('ascii') + CRLF

    if isinstance(message, Head):
        return f"{tag} HEAD {_qpath(message.pattern)} {format_version_sel(message.version_sel)}".encode('ascii') + CRLF

    if isinstance(message, Ihave):
        block = encode_block(message.block)
        _check_size(block, max_body, "signature block")
        header = f"{tag} IHAVE {_ref_fields(message.doc_ref)} {len(block)}"
        return header.encode('ascii') + CRLF + block

    if isinstance(message, GetAnswer):
        if message.status != 'ok':
            return f"{tag} GETANSWER {message.status}".encode('ascii') + CRLF
        block = encode_block(message.block)
        _check_size(block, max_body, "signature block")
        _check_size(message.body, max_body, "document body")
        ref = message.doc_ref
        header = (f"{tag} GETANSWER ok {_qpath(ref.path)} {ref.version} {ref.content_digest.hex()} "
                  f"{len(block)} {len(message.body)}")
        return header.encode('ascii') + CRLF + block + message.body

    if isinstance(message, HeadAnswer):
        parts = [f"{tag} HEADANSWER {message.status} {len(message.entries)}".encode('ascii') + CRLF]
        for ref, block in message.entries:
            data = encode_block(block)
            _check_size(data, max_body, "signature block")
            parts.append(f"{_ref_fields(ref)} {len(data)}".encode('ascii') + CRLF)
            parts.append(data)
        return b''.join(parts)

    raise TypeError(f"not a protocol message: {message!r}")


# --- decoding ---------------------------------------------------------------

def _line_at(data: bytes, offset: int) -> Tuple[str, int]:
    end = data.find(CRLF, offset)
    if end < 0:
        if len(data) - offset > MAX_HEADER:
            raise Malformed(data[offset:offset + 80].decode('ascii', 'replace'), "header line too long")
        raise NeedMoreData()
    try:
        line = data[offset:end].decode('ascii')
    except UnicodeDecodeError:
        raise Malformed(data[offset:end].decode('ascii', 'replace'), "non-ASCII header")
    return line, end + 2


def _int(text: str, line: str) -> int:
    if not text.isdigit():
        raise Malformed(line, f"expected decimal integer, found {text!r}")
    return int(text)


def _version(text: str, line: str) -> int:
    number = _int(text, line)
    try:
        return validate_version(number)
    except InvalidVersion as e:
        raise Malformed(line, str(e))


def _size(text: str, line: str) -> int:
    size = _int(text, line)
    if size > MAX_SIZE:
        raise Malformed(line, f"size out of range: {size}")
    return size


def _path(text: str, line: str, pattern: bool = False) -> str:
    try:
        path = unquote(text, errors='strict')
        if pattern:
            validate_pattern(path)
        else:
            validate_path(path)
    except (UnicodeDecodeError, DdnfsError) as e:
        raise Malformed(line, f"bad path: {e}")
    return path


def _sel(text: str, line: str) -> VersionSel:
    try:
        return parse_version_sel(text)
    except DdnfsError as e:
        raise Malformed(line, str(e))


def _digest(text: str, line: str) -> bytes:
    if len(text) != 64:
        raise Malformed(line, "digest must be 64 hex digits")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise Malformed(line, "digest is not hex")


def _ref(fields: List[str], line: str) -> DocRef:
    path, version, size, digest_hex = fields
    return DocRef(_path(path, line), _version(version, line), _size(size, line), _digest(digest_hex, line))


def _section(data: bytes, offset: int, length: int, max_body: int, what: str) -> Tuple[bytes, int]:
    if length > max_body:
        raise OversizeBody(f"declared {what} of {length} bytes exceeds cap {max_body}")
    if len(data) < offset + length:
        raise NeedMoreData()
    return data[offset:offset + length], offset + length


def _block(ref: DocRef, data: bytes, line: str) -> SignatureBlock:
    try:
        return decode_block(ref, data)
    except BodyLengthMismatch:
        raise
    except DdnfsError as e:
        raise Malformed(line, f"bad signature block: {e}")


def decode(data: bytes, max_body: int = MAX_BODY) -> Tuple[str, Message, int]:
    """
    Decode the first complete frame of data.  Raises NeedMoreData (nothing
    consumed) when the frame is incomplete.
    """
    line, offset = _line_at(data, 0)
    fields = line.split(' ')
    if len(fields) < 2:
        raise Malformed(line)
    tag, verb, args = fields[0], fields[1], fields[2:]
    if not valid_tag(tag):
        raise Malformed(line, f"bad tag {tag!r}")

    if verb == 'GET':
        if len(args) != 2:
            raise Malformed(line, "GET takes <path> <version>")
        return tag, Get(_path(args[0], line), _sel(args[1], line)), offset

    if verb == 'HEAD':
        if len(args) != 2:
            raise Malformed(line, "HEAD takes <pattern> <version>")
        return tag, Head(_path(args[0], line, pattern=True), _sel(args[1], line)), offset

    if verb == 'IHAVE':
        if len(args) != 5:
            raise Malformed(line, "IHAVE takes <path> <version> <size> <digest> <blocklen>")
        ref = _ref(args[:4], line)
        raw, offset = _section(data, offset, _int(args[4], line), max_body, "signature block")
        return tag, Ihave(ref, _block(ref, raw, line)), offset

    if verb == 'GETANSWER':
        if not args or args[0] not in GET_STATUSES:
            raise Malformed(line, "GETANSWER needs a status")
        if args[0] != 'ok':
            if len(args) != 1:
                raise Malformed(line, "error GETANSWER carries no arguments")
            return tag, GetAnswer(args[0]), offset
        if len(args) != 6:
            raise Malformed(line, "GETANSWER ok takes <path> <version> <digest> <blocklen> <bodylen>")
        path = _path(args[1], line)
        version = _version(args[2], line)
        digest_bytes = _digest(args[3], line)
        block_len = _int(args[4], line)
        body_len = _size(args[5], line)
        if body_len > max_body:
            raise OversizeBody(f"declared body of {body_len} bytes exceeds cap {max_body}")
        raw, offset = _section(data, offset, block_len, max_body, "signature block")
        body, offset = _section(data, offset, body_len, max_body, "document body")
        ref = DocRef(path, version, body_len, digest_bytes)
        return tag, GetAnswer('ok', ref, _block(ref, raw, line), body), offset

    if verb == 'HEADANSWER':
        if len(args) != 2 or args[0] not in HEAD_STATUSES:
            raise Malformed(line, "HEADANSWER takes <status> <count>")
        count = _int(args[1], line)
        entries = []
        for _ in range(count):
            entry_line, offset = _line_at(data, offset)
            entry_fields = entry_line.split(' ')
            if len(entry_fields) != 5:
                raise Malformed(entry_line, "HEADANSWER entry takes <path> <version> <size> <digest> <blocklen>")
            ref = _ref(entry_fields[:4], entry_line)
            raw, offset = _section(data, offset, _int(entry_fields[4], entry_line), max_body, "signature block")
            entries.append((ref, _block(ref, raw, entry_line)))
        return tag, HeadAnswer(args[0], tuple(entries)), offset

    raise Malformed(line, f"unknown verb {verb!r}")


class Decoder:
    """Incremental decoder for one connection; feed arbitrary chunks"""

    def __init__(self, max_body: int = MAX_BODY):
        self.buffer = bytearray()
        self.max_body = max_body

    def feed(self, chunk: bytes) -> List[Tuple[str, Message]]:
        self.buffer.extend(chunk)
        frames = []
        while self.buffer:
            try:
                tag, message, consumed = decode(bytes(self.buffer), self.max_body)
            except NeedMoreData:
                break
            del self.buffer[:consumed]
            frames.append((tag, message))
        return frames

    @property
    def pending(self) -> int:
        return len(self.buffer)


def describe(tag: str, message: Message) -> str:
    """One-line summary used in traces and debug logs"""
    verb = verb_of(message)
    if isinstance(message, (Ihave,)):
        return f"{tag} {verb} {message.doc_ref.path} {message.doc_ref.version} [{len(message.block)} sigs]"
    if isinstance(message, Get):
        return f"{tag} {verb} {message.path} {format_version_sel(message.version_sel)}"
    if isinstance(message, Head):
        return f"{tag} {verb} {message.pattern} {format_version_sel(message.version_sel)}"
    if isinstance(message, GetAnswer):
        if message.status != 'ok':
            return f"{tag} {verb} {message.status}"
        return f"{tag} {verb} ok {message.doc_ref.path} {message.doc_ref.version} [{len(message.block)} sigs]"
    return f"{tag} {verb} {message.status} {len(message.entries)}"
