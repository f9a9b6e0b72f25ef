"""
Document model: immutable versioned documents, their identities, digests
and lifecycle status.
"""

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import List, Union

from errors import InvalidPath, InvalidPattern, InvalidSize, InvalidTransition, InvalidVersion

MAX_VERSION = 2 ** 64 - 1
MAX_SIZE = 2 ** 64 - 1
DIGEST_SIZE = 32


def digest(data: bytes) -> bytes:
    """Content digest used everywhere a document is referenced"""
    return hashlib.sha256(data).digest()


def _segments(path: str) -> List[str]:
    return path[1:].split('/')


def validate_path(path: str) -> str:
    """Raise InvalidPath unless path is a well-formed absolute document path"""
    if not isinstance(path, str) or not path.startswith('/'):
        raise InvalidPath(f"path must begin with '/': {path!r}")
    for segment in _segments(path):
        if segment in ('', '.', '..'):
            raise InvalidPath(f"bad segment {segment!r} in {path!r}")
        if segment in ('*', '**'):
            raise InvalidPath(f"wildcard segment in document path {path!r}")
    return path


def validate_version(version: int) -> int:
    if isinstance(version, bool) or not isinstance(version, int):
        raise InvalidVersion(f"version must be an integer: {version!r}")
    if version < 1 or version > MAX_VERSION:
        raise InvalidVersion(f"version out of range: {version}")
    return version


@dataclass(frozen=True, order=True)
class DocumentId:
    path: str
    version: int

    def __post_init__(self):
        validate_path(self.path)
        validate_version(self.version)

    def __str__(self):
        return f"{self.path}@{self.version}"


@dataclass(frozen=True)
class DocRef:
    """The signed reference to a document: identity, size and digest"""
    path: str
    version: int
    size: int
    content_digest: bytes

    @property
    def id(self) -> DocumentId:
        return DocumentId(self.path, self.version)

    def validate(self) -> 'DocRef':
        """Raise unless every field fits the signed encoding"""
        validate_path(self.path)
        validate_version(self.version)
        if isinstance(self.size, bool) or not isinstance(self.size, int) or not 0 <= self.size <= MAX_SIZE:
            raise InvalidSize(f"size out of range: {self.size!r}")
        if len(self.content_digest) != DIGEST_SIZE:
            raise InvalidSize(f"digest must be {DIGEST_SIZE} bytes")
        return self

    def __str__(self):
        return f"{self.path}@{self.version} ({self.size} bytes, {self.content_digest.hex()[:12]})"


@dataclass(frozen=True)
class Document:
    id: DocumentId
    content: bytes
    size: int
    content_digest: bytes

    def __post_init__(self):
        if self.size != len(self.content):
            raise ValueError("size does not match content length")
        if self.content_digest != digest(self.content):
            raise ValueError("content digest does not match content")

    @property
    def path(self) -> str:
        return self.id.path

    @property
    def version(self) -> int:
        return self.id.version

    @property
    def ref(self) -> DocRef:
        return DocRef(self.id.path, self.id.version, self.size, self.content_digest)


def make_document(path: str, version: int, content: bytes) -> Document:
    """Create an immutable document, computing its size and digest"""
    doc_id = DocumentId(path, version)
    content = bytes(content)
    return Document(doc_id, content, len(content), digest(content))


class VersionOrder(Enum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


def version_order(a: int, b: int) -> VersionOrder:
    """GREATER means a supersedes b"""
    if a > b:
        return VersionOrder.GREATER
    if a < b:
        return VersionOrder.LESS
    return VersionOrder.EQUAL


class Selector(str, Enum):
    """Non-numeric version selectors, spelled as on the wire"""
    ANY = '*'
    ACTIVE = '@'


VersionSel = Union[int, Selector]


def parse_version_sel(token: str) -> VersionSel:
    if token == Selector.ANY.value:
        return Selector.ANY
    if token == Selector.ACTIVE.value:
        return Selector.ACTIVE
    if not token.isdigit():
        raise InvalidVersion(f"bad version selector {token!r}")
    return validate_version(int(token))


def format_version_sel(sel: VersionSel) -> str:
    if isinstance(sel, Selector):
        return sel.value
    return str(sel)


def validate_pattern(pattern: str) -> List[str]:
    """Return the segments of a path glob or raise InvalidPattern"""
    if not isinstance(pattern, str) or not pattern.startswith('/'):
        raise InvalidPattern(f"pattern must begin with '/': {pattern!r}")
    segments = _segments(pattern)
    for index, segment in enumerate(segments):
        if segment in ('', '.', '..'):
            raise InvalidPattern(f"bad segment {segment!r} in {pattern!r}")
        if segment == '**' and index != len(segments) - 1:
            raise InvalidPattern(f"'**' only allowed as final segment: {pattern!r}")
        if '*' in segment and segment not in ('*', '**'):
            raise InvalidPattern(f"partial wildcards unsupported: {pattern!r}")
    return segments


def path_match(pattern: str, path: str) -> bool:
    """'*' matches exactly one segment, a trailing '**' one or more"""
    wanted = validate_pattern(pattern)
    actual = _segments(validate_path(path))

    if wanted[-1] == '**':
        prefix = wanted[:-1]
        if len(actual) <= len(prefix):
            return False
    else:
        prefix = wanted
        if len(actual) != len(prefix):
            return False

    return all(w == '*' or w == a for w, a in zip(prefix, actual))


class DocumentStatus(str, Enum):
    PENDING = 'pending'
    ACTIVE = 'active'
    SUPERSEDED = 'superseded'


LEGAL_TRANSITIONS = {
    (DocumentStatus.PENDING, DocumentStatus.ACTIVE),
    (DocumentStatus.ACTIVE, DocumentStatus.SUPERSEDED),
    (DocumentStatus.PENDING, DocumentStatus.SUPERSEDED),
}


def can_transition(old: DocumentStatus, new: DocumentStatus) -> bool:
    return (old, new) in LEGAL_TRANSITIONS


def check_transition(old: DocumentStatus, new: DocumentStatus) -> DocumentStatus:
    if not can_transition(old, new):
        raise InvalidTransition(f"{old.value} -> {new.value}")
    return new
