"""Exception hierarchy shared by all kgmatch modules."""

from __future__ import annotations


class KGMatchError(Exception):
    """Base class for every error raised by kgmatch."""


class ConfigurationError(KGMatchError):
    """Invalid configuration or a missing dependency for the requested operation."""


class FormatError(KGMatchError):
    """A malformed line or record in an input file."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line


class NotFoundError(KGMatchError, KeyError):
    """Lookup of an id that is not in the store."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class EmbeddingError(KGMatchError):
    """Invalid vector (zero, non-finite) or a failed embedding call."""


class TransportError(KGMatchError):
    """Retryable failure talking to a remote provider."""


class CorpusEmbeddingError(KGMatchError):
    """embed_corpus stopped part-way; ``completed`` records were persisted."""

    def __init__(self, message: str, completed: int):
        super().__init__(f"{message} (completed={completed})")
        self.completed = completed


class CacheMissError(KGMatchError):
    """Replay-only LLM client was asked for a request it has never recorded."""


class TemplateError(KGMatchError):
    """A prompt template failed validation."""


class PrerequisiteError(KGMatchError):
    """A CLI command was run before the artifacts it depends on exist."""
