"""Values, node bodies, in-memory graphs and the JSON dump format.

A node body is either a :class:`FixedBody` (a typed record with named
fields) or a :class:`ListBody` (an ordered sequence of values). Both hold
*values*: ``None``, an ``int``, a ``str`` or a :class:`Ref`.

The same :class:`Ref` type is used in two forms:

* stored form, inside the store: ``Ref(node_id)`` where ``0`` is a null
  reference;
* memory form, inside a :class:`MemGraph`: ``Ref(mem_node)`` for an edge to
  another in-memory node, ``Ref(0)`` for a null reference, or
  ``Ref(node_id)`` for a bare reference to a stored node that was not
  materialized in memory (``dbref`` in the dump format).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Union

from gedb.errors import DumpError

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1
ID_MAX = 2**64 - 1

NULL_ID = 0


@dataclass(frozen=True)
class Ref:
    target: Union[int, "MemNode"]

    def __post_init__(self):
        t = self.target
        if type(t) is int:
            if not 0 <= t <= ID_MAX:
                raise ValueError(f"invalid reference target: {t!r}")
        elif not isinstance(t, MemNode):
            raise TypeError(f"invalid reference target: {t!r}")

    @property
    def is_null(self) -> bool:
        return not isinstance(self.target, MemNode) and self.target == NULL_ID

    def __repr__(self) -> str:
        t = self.target
        if isinstance(t, MemNode):
            return f"Ref(<{t.describe()}>)"
        return f"Ref({t})"


NULL_REF = Ref(NULL_ID)

Value = Union[None, int, str, Ref]


def check_value(v: Any) -> Value:
    """Validate a value, turning a bare MemNode into a reference to it."""
    if v is None or isinstance(v, Ref):
        return v
    if isinstance(v, MemNode):
        return Ref(v)
    if type(v) is int:
        if not INT_MIN <= v <= INT_MAX:
            raise ValueError(f"integer out of signed 64-bit range: {v}")
        return v
    if type(v) is str:
        return v
    raise TypeError(f"unsupported value type: {type(v).__name__}")


@dataclass
class FixedBody:
    type_name: str
    fields: dict[str, Value] = field(default_factory=dict)

    kind = "fixed"

    def values(self) -> Iterable[Value]:
        return self.fields.values()

    def copy(self) -> FixedBody:
        return FixedBody(self.type_name, dict(self.fields))


@dataclass
class ListBody:
    items: list[Value] = field(default_factory=list)

    kind = "list"

    def values(self) -> Iterable[Value]:
        return self.items

    def copy(self) -> ListBody:
        return ListBody(list(self.items))


Body = Union[FixedBody, ListBody]


class MemNode:
    """A node of an in-memory graph.

    ``id`` is the id of the corresponding stored node, or 0 for a node that
    has no stored counterpart yet. Equality is identity.
    """

    __slots__ = ("id", "body")

    def __init__(self, body: Body, id: int = 0):
        if type(id) is not int or id < 0:
            raise ValueError(f"invalid node id: {id!r}")
        self.id = id
        self.body = body

    @property
    def kind(self) -> str:
        return self.body.kind

    @property
    def is_white(self) -> bool:
        return self.id == NULL_ID

    def __getitem__(self, key: str | int) -> Value:
        if isinstance(self.body, FixedBody):
            return self.body.fields[key]
        return self.body.items[key]

    def __setitem__(self, key: str | int, value: Any) -> None:
        value = check_value(value)
        if isinstance(self.body, FixedBody):
            self.body.fields[key] = value
        else:
            self.body.items[key] = value

    def append(self, value: Any) -> None:
        self.body.items.append(check_value(value))

    def target(self, key: str | int) -> MemNode | None:
        """Follow the in-memory reference stored at ``key``."""
        v = self[key]
        if isinstance(v, Ref) and isinstance(v.target, MemNode):
            return v.target
        return None

    def children(self) -> Iterator[MemNode]:
        for v in self.body.values():
            if isinstance(v, Ref) and isinstance(v.target, MemNode):
                yield v.target

    def describe(self) -> str:
        name = self.body.type_name if isinstance(self.body, FixedBody) else "list"
        return f"{name}#{self.id}"

    def __repr__(self) -> str:
        return f"MemNode({self.describe()})"


def fixed_node(type_name: str, *, id: int = 0, **fields: Any) -> MemNode:
    return MemNode(FixedBody(type_name, {k: check_value(v) for k, v in fields.items()}), id)


def list_node(*items: Any, id: int = 0) -> MemNode:
    return MemNode(ListBody([check_value(v) for v in items]), id)


def reachable(roots: Iterable[MemNode]) -> list[MemNode]:
    """Nodes reachable from ``roots`` in first-visit (FIFO) order."""
    seen: set[int] = set()
    order: list[MemNode] = []
    queue = deque()
    for r in roots:
        if r is not None and id(r) not in seen:
            seen.add(id(r))
            queue.append(r)
    while queue:
        node = queue.popleft()
        order.append(node)
        for child in node.children():
            if id(child) not in seen:
                seen.add(id(child))
                queue.append(child)
    return order


@dataclass
class MemGraph:
    """Root handles plus an optional key for each node.

    ``nodes`` maps dump keys to nodes. It may be left empty for graphs
    built in code; keys are generated on serialization.
    """

    roots: list[MemNode]
    nodes: dict[str, MemNode] = field(default_factory=dict)

    def closure(self) -> list[MemNode]:
        return reachable(self.roots)

    def key_of(self) -> dict[int, str]:
        """Map ``id(node)`` to a dump key for every reachable node."""
        keys = {id(n): k for k, n in self.nodes.items()}
        used = set(self.nodes)
        white_counter = 0
        for node in self.closure():
            if id(node) in keys:
                continue
            if node.id:
                key = f"n{node.id}"
                suffix = 0
                while key in used:
                    suffix += 1
                    key = f"n{node.id}_{suffix}"
            else:
                key = f"w{white_counter}"
                while key in used:
                    white_counter += 1
                    key = f"w{white_counter}"
                white_counter += 1
            keys[id(node)] = key
            used.add(key)
        return keys

    def __getitem__(self, key: str) -> MemNode:
        return self.nodes[key]


@dataclass
class NodeRecord:
    id: int
    orc: int
    irc: int
    body: Body

    def copy(self) -> NodeRecord:
        return NodeRecord(self.id, self.orc, self.irc, self.body.copy())


@dataclass
class Snapshot:
    """Whole-database content: every record, keyed by id."""

    records: dict[int, NodeRecord] = field(default_factory=dict)

    def roots(self) -> list[int]:
        return sorted(i for i, r in self.records.items() if r.orc > 0)


# ---------------------------------------------------------------------------
# Value codec, shared with the journal


def encode_value(v: Value, key_of: dict[int, str] | None = None) -> dict:
    if v is None:
        return {"none": None}
    if isinstance(v, Ref):
        t = v.target
        if isinstance(t, MemNode):
            if key_of is None:
                raise ValueError("in-memory reference in stored context")
            return {"ref": key_of[id(t)]}
        if t == NULL_ID:
            return {"nullref": None}
        return {"dbref": t}
    if type(v) is int:
        return {"int": v}
    return {"str": v}


def decode_value(obj: Any, resolve=None) -> Value:
    """Decode one encoded value. ``resolve`` maps a ``ref`` key to a target."""
    if not isinstance(obj, dict) or len(obj) != 1:
        raise DumpError(f"malformed value: {obj!r}")
    (tag, payload), = obj.items()
    if tag == "none":
        return None
    if tag == "nullref":
        return NULL_REF
    if tag == "int":
        if type(payload) is not int or not INT_MIN <= payload <= INT_MAX:
            raise DumpError(f"bad int payload: {payload!r}")
        return payload
    if tag == "str":
        if not isinstance(payload, str):
            raise DumpError(f"bad str payload: {payload!r}")
        return payload
    if tag == "dbref":
        if type(payload) is not int or payload <= 0 or payload > ID_MAX:
            raise DumpError(f"dbref must be a positive id: {payload!r}")
        return Ref(payload)
    if tag == "ref":
        if resolve is None or not isinstance(payload, str):
            raise DumpError(f"bad ref: {payload!r}")
        return resolve(payload)
    raise DumpError(f"unknown value tag {tag!r}")


def encode_body(body: Body, key_of: dict[int, str] | None = None) -> dict:
    if isinstance(body, FixedBody):
        return {
            "kind": "fixed",
            "type_name": body.type_name,
            "fields": {k: encode_value(v, key_of) for k, v in body.fields.items()},
        }
    return {"kind": "list", "items": [encode_value(v, key_of) for v in body.items]}


def decode_body(obj: dict, resolve=None) -> Body:
    kind = obj.get("kind")
    if kind == "fixed":
        name = obj.get("type_name")
        fields = obj.get("fields")
        if not isinstance(name, str) or not name:
            raise DumpError(f"fixed node needs a type_name: {obj!r}")
        if not isinstance(fields, dict):
            raise DumpError(f"fixed node needs a fields object: {obj!r}")
        return FixedBody(name, {k: decode_value(v, resolve) for k, v in fields.items()})
    if kind == "list":
        items = obj.get("items")
        if not isinstance(items, list):
            raise DumpError(f"list node needs an items array: {obj!r}")
        return ListBody([decode_value(v, resolve) for v in items])
    raise DumpError(f"unknown node kind {kind!r}")


# ---------------------------------------------------------------------------
# Dump format

_NODE_KEYS = {"id", "kind", "type_name", "fields", "items"}


def _dump_text(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def serialize_dump(g: MemGraph | Snapshot) -> str:
    """Render a graph or a snapshot as a deterministic JSON document."""
    if isinstance(g, Snapshot):
        return _serialize_snapshot(g)
    key_of = g.key_of()
    nodes = {}
    for node in g.closure():
        entry = encode_body(node.body, key_of)
        entry["id"] = node.id
        nodes[key_of[id(node)]] = entry
    roots = []
    for r in g.roots:
        k = key_of[id(r)]
        if k not in roots:
            roots.append(k)
    return _dump_text({"roots": roots, "nodes": nodes})


def _serialize_snapshot(s: Snapshot) -> str:
    nodes = {}
    for nid in sorted(s.records):
        rec = s.records[nid]
        entry = encode_body(rec.body)
        # stored ids become keys; a dangling id reads as null and ids are never
        # reused, so it is exported as the null it will always read as
        values = entry["fields"] if entry["kind"] == "fixed" else entry["items"]
        slots = values.keys() if isinstance(values, dict) else range(len(values))
        for slot in slots:
            target = values[slot].get("dbref")
            if target is not None:
                values[slot] = {"ref": str(target)} if target in s.records else {"nullref": None}
        entry.update(id=nid, orc=rec.orc, irc=rec.irc)
        nodes[str(nid)] = entry
    return _dump_text({"roots": [str(i) for i in s.roots()], "nodes": nodes})


def parse_dump(text: str) -> MemGraph | Snapshot:
    """Parse a dump document.

    Documents whose nodes carry ``orc``/``irc`` are database snapshots and
    come back as a :class:`Snapshot`; anything else is a :class:`MemGraph`.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DumpError(f"syntax error: {exc.msg}", exc.pos) from None
    if not isinstance(doc, dict) or set(doc) != {"roots", "nodes"}:
        raise DumpError('document must be an object with exactly "roots" and "nodes"')
    roots, nodes = doc["roots"], doc["nodes"]
    if not isinstance(roots, list) or not all(isinstance(k, str) for k in roots):
        raise DumpError('"roots" must be a list of node keys')
    if not isinstance(nodes, dict):
        raise DumpError('"nodes" must be an object')

    counted = [("orc" in n and "irc" in n) for n in nodes.values() if isinstance(n, dict)]
    is_snapshot = bool(counted) and all(counted)
    if any(counted) and not is_snapshot:
        raise DumpError("either every node or no node may carry orc/irc")

    allowed = _NODE_KEYS | ({"orc", "irc"} if is_snapshot else set())
    ids: dict[int, str] = {}
    for key, entry in nodes.items():
        if not isinstance(entry, dict):
            raise DumpError(f"node {key!r} is not an object")
        extra = set(entry) - allowed
        if extra:
            raise DumpError(f"node {key!r} has unknown members {sorted(extra)}")
        nid = entry.get("id")
        if type(nid) is not int:
            raise DumpError(f"node {key!r} has no integer id")
        if nid < 0 or nid > ID_MAX:
            raise DumpError(f"node {key!r} has invalid id {nid}")
        if nid:
            if nid in ids:
                raise DumpError(f"duplicate id {nid} on nodes {ids[nid]!r} and {key!r}")
            ids[nid] = key
    for k in roots:
        if k not in nodes:
            raise DumpError(f"root key {k!r} does not name a node")

    if is_snapshot:
        return _parse_snapshot(roots, nodes)

    mem = {key: MemNode(FixedBody("?") if e.get("kind") == "fixed" else ListBody(), e["id"])
           for key, e in nodes.items()}

    def resolve(k: str) -> Ref:
        if k not in mem:
            raise DumpError(f"unresolved ref key {k!r}")
        return Ref(mem[k])

    for key, entry in nodes.items():
        mem[key].body = decode_body(entry, resolve)
    root_nodes = [mem[k] for k in roots]
    return MemGraph(root_nodes, mem)


def _parse_snapshot(roots: list[str], nodes: dict) -> Snapshot:
    key_to_id = {}
    for key, entry in nodes.items():
        if entry["id"] == 0:
            raise DumpError(f"snapshot node {key!r} must have a positive id")
        key_to_id[key] = entry["id"]

    def resolve(k: str) -> Ref:
        if k not in key_to_id:
            raise DumpError(f"unresolved ref key {k!r}")
        return Ref(key_to_id[k])

    records = {}
    for key, entry in nodes.items():
        orc, irc = entry["orc"], entry["irc"]
        if type(orc) is not int or type(irc) is not int or orc < 0 or irc < 0:
            raise DumpError(f"node {key!r} has invalid counters")
        nid = entry["id"]
        records[nid] = NodeRecord(nid, orc, irc, decode_body(entry, resolve))
    snap = Snapshot(records)
    expected = sorted(key_to_id[k] for k in set(roots))
    if expected != snap.roots():
        raise DumpError("snapshot roots must list exactly the nodes with orc > 0")
    return snap


def load_dump(path) -> MemGraph | Snapshot:
    with open(path, encoding="utf-8") as fh:
        return parse_dump(fh.read())
