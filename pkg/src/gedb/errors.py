"""Exception hierarchy shared by every gedb module."""

from __future__ import annotations


class GedbError(Exception):
    """Base class for all gedb errors."""


class DumpError(GedbError):
    """A graph dump could not be parsed or is not well-formed."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)
        self.position = position


class StoreError(GedbError):
    pass


class NodeNotFound(StoreError, KeyError):
    def __init__(self, node_id: int):
        super().__init__(f"node {node_id} does not exist")
        self.node_id = node_id

    def __str__(self) -> str:
        return self.args[0]


class SchemaError(StoreError):
    pass


class InvariantViolation(StoreError):
    """A reference counter would go negative, or a similar broken invariant."""


class CorruptJournal(StoreError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class JournalVersionError(CorruptJournal):
    pass


class EngineError(GedbError):
    pass


class UnresolvedNodeError(EngineError):
    """A gray node or a bare id reference names a record that does not exist."""

    def __init__(self, node_id: int):
        super().__init__(f"node {node_id} referenced by the modified graph does not exist")
        self.node_id = node_id


class DuplicateIdError(EngineError):
    pass


class TransactionError(EngineError):
    pass


class UnsafeHintError(EngineError):
    pass
