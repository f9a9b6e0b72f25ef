"""Exception hierarchy shared by every ddnfs module."""

from typing import Optional


class DdnfsError(Exception):
    """Base class for all ddnfs errors"""


class SubjectError(DdnfsError):
    """An error about one particular peer (signer, originator, ...)"""

    def __init__(self, subject, message: str = ""):
        self.signer = subject
        label = subject.short() if hasattr(subject, 'short') else str(subject)
        super().__init__(f"{message or self.__class__.__name__}: {label}")


# document model
class InvalidPath(DdnfsError):
    pass


class InvalidVersion(DdnfsError):
    pass


class InvalidSize(DdnfsError):
    pass


class InvalidPattern(DdnfsError):
    pass


class InvalidTransition(DdnfsError):
    pass


# identities
class SeedTooShort(DdnfsError):
    pass


class MalformedKey(DdnfsError):
    pass


class MalformedSignature(DdnfsError):
    pass


# signature blocks
class LengthMismatch(DdnfsError):
    pass


class AlreadySigned(SubjectError):
    pass


class ParentUnknown(DdnfsError):
    pass


class BadSignature(SubjectError):
    pass


class MissingChainRecord(SubjectError):
    pass


class UnknownSigner(SubjectError):
    pass


class DigestMismatch(DdnfsError):
    pass


class MultipleOriginators(DdnfsError):
    pass


class DocRefMismatch(DdnfsError):
    pass


class ConflictingRecord(SubjectError):
    pass


# policy and peerlist
class PolicySyntaxError(DdnfsError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class UnknownPeerRef(DdnfsError):
    pass


class BadPattern(DdnfsError):
    pass


class NotAdmin(DdnfsError):
    pass


class VersionNotNewer(DdnfsError):
    pass


class PeerlistParseError(DdnfsError):
    pass


# wire protocol
class OversizeBody(DdnfsError):
    pass


class Malformed(DdnfsError):
    def __init__(self, line: str, message: str = "malformed frame"):
        self.line = line
        super().__init__(f"{message}: {line[:120]!r}")


class NeedMoreData(DdnfsError):
    pass


class BodyLengthMismatch(DdnfsError):
    pass


# replication engine
class NotAuthorized(DdnfsError):
    pass


class StoreFull(DdnfsError):
    pass


class AllFailed(DdnfsError):
    pass


class Inconsistent(DdnfsError):
    pass


class HelperUnreachable(DdnfsError):
    pass


# store
class ConflictDetected(DdnfsError):
    def __init__(self, message: str, existing=None):
        self.existing = existing
        super().__init__(message)


class NotFound(DdnfsError):
    pass


class StoreIoError(DdnfsError):
    pass


# node and simulator
class ConfigError(DdnfsError):
    pass


class BindFailure(DdnfsError):
    pass


class BadPeerlist(DdnfsError):
    pass


def describe(error: Optional[BaseException]) -> str:
    """Short 'Kind: message' text used in logs and CLI output"""
    if error is None:
        return ""
    return f"{error.__class__.__name__}: {error}"
