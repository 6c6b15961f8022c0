"""Exception types used across the pipeline."""

from __future__ import annotations


class LanceError(Exception):
    """Base class for every error raised by this package."""


# ---------------------------------------------------------------------------
# corpus


class EmptyInputError(LanceError):
    """No records were given, or none survived ingestion."""


class MalformedRecordError(LanceError):
    """A raw record failed validation; carries its position in the input."""

    def __init__(self, index: int | None, reason: str):
        self.index = index
        self.reason = reason
        where = "record" if index is None else f"record {index}"
        super().__init__(f"{where}: {reason}")


class KindMismatchError(LanceError):
    """Two datasets (or a dataset and a file) disagree on their kind."""


class SchemaError(LanceError):
    """A serialized document violates its schema."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if field is not None:
            parts.append(f"field {field!r}")
        prefix = ", ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


# ---------------------------------------------------------------------------
# backend


class TransportError(LanceError):
    """Connection failure, timeout, or server-side error; retryable."""

    def __init__(self, message: str, attempts: list[str] | None = None):
        self.attempts = attempts or []
        if self.attempts:
            message = f"{message} (attempts: {'; '.join(self.attempts)})"
        super().__init__(message)


class RateLimitedError(TransportError):
    """The server asked us to back off; retried with exponential delay."""


class BadResponseError(LanceError):
    """The server answered with a payload we cannot use; never retried."""


class EmptyCompletionError(LanceError):
    """The model returned no text at all."""


class PartialFailureError(LanceError):
    """One sample of a multi-sample request failed after retries."""

    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"sample {index} failed: {cause}")


# ---------------------------------------------------------------------------
# review


class UnparseableReviewError(LanceError):
    """Model output contains no final score line; carries the raw text."""

    def __init__(self, raw: str):
        self.raw = raw
        super().__init__("no score line found in review output")


class ScoreOutOfRangeError(LanceError):
    """The parsed score falls outside 0..10; carries the raw text."""

    def __init__(self, total: int, raw: str):
        self.total = total
        self.raw = raw
        super().__init__(f"score {total} outside 0..10")


class TooManyFailuresError(LanceError):
    """Review failures exceeded the configured fraction of the dataset."""


# ---------------------------------------------------------------------------
# generate


class AllEmptyError(LanceError):
    """Every sampled completion trimmed down to the empty string."""


# ---------------------------------------------------------------------------
# filtering


class MissingReviewError(LanceError):
    """A candidate reached the reward gate without a review."""


# ---------------------------------------------------------------------------
# toy trainer


class UnknownTokenError(LanceError):
    """A token is not in the model vocabulary."""

    def __init__(self, token: str, position: int):
        self.token = token
        self.position = position
        super().__init__(f"unknown token {token!r} at position {position}")


class VocabMismatchError(LanceError):
    """Two models that must share a vocabulary do not."""


class NonFiniteLossError(LanceError):
    """Training diverged: the loss (or the parameters) became non-finite."""


# ---------------------------------------------------------------------------
# orchestration / cli


class ConfigError(LanceError):
    """The run configuration is invalid or incompatible with existing state."""


class LockedError(LanceError):
    """Another run owns the output directory."""


class UsageError(LanceError):
    """Bad command line; the CLI prints usage and exits 1."""
