"""Exception hierarchy shared by all taxokit modules."""

from __future__ import annotations


class TaxoError(Exception):
    """Base class for every error raised by taxokit."""


class TaxonomyError(TaxoError, ValueError):
    """Structural problem with a taxonomy (bad file, cycle, unknown node, ...)."""

    def __init__(self, message: str, node: str | None = None, line: int | None = None):
        super().__init__(message)
        self.node = node
        self.line = line


class DatasetFormatError(TaxoError, ValueError):
    """Malformed instruction dataset record."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class EmbeddingError(TaxoError, ValueError):
    pass


class BackendError(TaxoError):
    """A chat or embedding backend failed (transport, protocol, credentials)."""


class ResponseParseError(TaxoError, ValueError):
    """No usable answer could be extracted from a model response."""


class ParseEmpty(ResponseParseError):
    """The response parsed to zero entities (or an empty parent)."""


class PipelineError(TaxoError):
    pass


class ConfigError(TaxoError, ValueError):
    pass
