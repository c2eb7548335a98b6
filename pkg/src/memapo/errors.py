"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MemapoError(Exception):
    """Base class for every error raised by memapo."""


# memory model
class EmptyField(MemapoError, ValueError):
    pass


# vector index
class DimensionMismatch(MemapoError, ValueError):
    pass


class ZeroNorm(MemapoError, ValueError):
    pass


# model gateway
class ProviderError(MemapoError):
    """Any failure talking to a model endpoint."""


class TransportError(ProviderError):
    pass


class AuthRejected(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class MalformedResponse(ProviderError):
    pass


class ScriptExhausted(ProviderError):
    pass


class InvalidRequest(MemapoError, ValueError):
    """A request failed validation before any network call was attempted."""


class UnknownModel(MemapoError, KeyError):
    pass


# meta-prompt codec
class MissingBinding(MemapoError, KeyError):
    pass


class UnknownPlaceholder(MemapoError, ValueError):
    pass


class ReplyParseError(MemapoError, ValueError):
    """Base for structured-reply failures; callers re-ask once, then give up."""


class NoJsonFound(ReplyParseError):
    pass


class SchemaViolation(ReplyParseError):
    pass


# harness and persistence
class DatasetError(MemapoError):
    pass


class ParseError(DatasetError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateQuestion(DatasetError):
    def __init__(self, line: int, first_line: int):
        super().__init__(f"line {line}: duplicate of question on line {first_line}")
        self.line = line
        self.first_line = first_line


class EmptyDataset(DatasetError):
    pass


class EmbeddingModelMismatch(MemapoError):
    pass


class SnapshotError(MemapoError):
    pass


class VersionUnsupported(SnapshotError):
    pass


class IntegrityError(SnapshotError):
    pass


class ConfigError(MemapoError, ValueError):
    pass
