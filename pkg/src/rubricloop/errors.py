from __future__ import annotations

from typing import Optional


class RubricLoopError(RuntimeError):
    """Base class for every error raised by rubricloop."""


class InputError(RubricLoopError, ValueError):
    """Raised when caller-supplied data is malformed (bad matrix, bad dataset, bad split)."""


class ConfigError(RubricLoopError, ValueError):
    """Raised when a run configuration is invalid."""


class TransportError(RubricLoopError):
    """Raised when a completion cannot be obtained after retries."""

    def __init__(self, message: str, tag: str = "", fingerprint: str = "") -> None:
        super().__init__(message)
        self.tag = tag
        self.fingerprint = fingerprint


class ProtocolError(TransportError):
    """Raised when the provider answers with a body we cannot interpret."""


class MockScriptError(RubricLoopError, KeyError):
    """Raised when a scripted provider has no reply for a request."""

    def __init__(self, tag: str, fingerprint: str) -> None:
        super().__init__(f"No scripted reply for tag={tag} fingerprint={fingerprint}")
        self.tag = tag
        self.fingerprint = fingerprint

    def __str__(self) -> str:
        return str(self.args[0])


class ParseError(RubricLoopError, ValueError):
    """Raised when model output does not follow the requested format."""

    def __init__(self, message: str, raw: Optional[str] = None) -> None:
        super().__init__(message)
        self.raw = raw


class GradingParseError(ParseError):
    """A grading reply without a usable score, even after the strict re-prompt."""


class BatchAbortedError(RubricLoopError):
    """Raised when too many items in one evaluation batch fail to parse."""

    def __init__(self, failed: int, total: int) -> None:
        super().__init__(f"{failed} of {total} grading replies could not be parsed")
        self.failed = failed
        self.total = total


class RunStoreError(RubricLoopError):
    """Raised when a run directory is missing or inconsistent."""
