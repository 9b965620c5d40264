"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TabgrError(Exception):
    pass


class TableError(TabgrError):
    """Raised for invalid table records or table operations."""


class EmptyHeader(TableError):
    pass


class MalformedRecord(TableError):
    pass


class WidthMismatch(TableError):
    pass


class DimensionMismatch(TabgrError):
    pass


class IndexOutOfRange(TabgrError, IndexError):
    pass


class EmptyGraph(TabgrError):
    pass


class MissingPlaceholder(TabgrError, KeyError):
    def __init__(self, name: str) -> None:
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unbound placeholder {{{self.name}}}"


class LlmError(TabgrError):
    pass


class LlmUnavailable(LlmError):
    """The LLM could not be reached or produced no usable reply."""


class LlmTimeout(LlmUnavailable, TimeoutError):
    pass


class LlmAuthError(LlmError):
    pass


class MissingTable(TabgrError, KeyError):
    pass


class ConfigError(TabgrError):
    pass
