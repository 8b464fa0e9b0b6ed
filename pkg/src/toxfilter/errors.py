"""Exception hierarchy shared across the filtering pipeline."""

from __future__ import annotations


class ToxfilterError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ToxfilterError):
    """Invalid or incomplete configuration (bad backend value, missing path)."""


class CorpusError(ToxfilterError):
    """Malformed corpus input.

    ``line`` is the 1-based line number for JSONL sources, when known.
    """

    def __init__(self, message: str, *, line: int | None = None, record_id: str | None = None):
        self.line = line
        self.record_id = record_id
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VerdictError(ToxfilterError):
    """A classifier verdict violated the verdict schema."""


class BackendError(ToxfilterError):
    """Base class for classifier/judge backend failures."""


class TransportError(BackendError):
    """Remote endpoint unreachable or persistently failing after retries."""

    def __init__(self, message: str, *, attempts: int = 1):
        self.attempts = attempts
        super().__init__(message)


class ProtocolError(BackendError):
    """Remote endpoint answered, but the body does not follow the wire protocol.

    The offending body is preserved on ``raw_body`` for auditing.
    """

    def __init__(self, message: str, *, raw_body: str = ""):
        self.raw_body = raw_body
        super().__init__(message)


class JudgeError(ToxfilterError):
    """Judge prompt construction or response parsing failed."""


class CheckpointError(ToxfilterError):
    """Checkpoint file unreadable or structurally invalid."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint was written against a different corpus (digest mismatch)."""
