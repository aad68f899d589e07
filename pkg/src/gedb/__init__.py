"""An embedded object-graph database with declarative ``embed`` updates."""

from gedb.engine import EmbedReport, Engine, GcStrategy, embed, embed_multi, load
from gedb.errors import GedbError
from gedb.model import (
    NULL_REF,
    FixedBody,
    ListBody,
    MemGraph,
    MemNode,
    NodeRecord,
    Ref,
    Snapshot,
    fixed_node,
    list_node,
    parse_dump,
    serialize_dump,
)
from gedb.store import Store

__all__ = [
    "EmbedReport", "Engine", "GcStrategy", "embed", "embed_multi", "load", "GedbError",
    "NULL_REF", "FixedBody", "ListBody", "MemGraph", "MemNode", "NodeRecord", "Ref",
    "Snapshot", "fixed_node", "list_node", "parse_dump", "serialize_dump", "Store",
]
