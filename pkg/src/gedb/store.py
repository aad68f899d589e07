"""Persistent node table.

A :class:`Store` keeps every record in memory. When opened on a path it is
backed by an append-only journal: every mutation is appended as a framed
record and a COMMIT record closes each atomic unit. Reopening replays the
journal up to the last COMMIT; an incomplete tail (torn write) is dropped.

Journal layout, little endian::

    header:  b"GEDB" u16 version
    record:  u32 length | u8 opcode | payload | u32 crc32(opcode + payload)

``length`` covers the opcode and the payload. Payloads are compact JSON.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from gedb.errors import (
    CorruptJournal,
    InvariantViolation,
    JournalVersionError,
    NodeNotFound,
    SchemaError,
    StoreError,
)
from gedb.model import (
    NULL_ID,
    Body,
    FixedBody,
    ListBody,
    MemNode,
    NodeRecord,
    Ref,
    Snapshot,
    decode_body,
    encode_body,
)

logger = logging.getLogger(__name__)

MAGIC = b"GEDB"
FORMAT_VERSION = 1
HEADER = MAGIC + struct.pack("<H", FORMAT_VERSION)

OP_SCHEMA = 1
OP_ALLOC = 2
OP_BODY = 3
OP_COUNTER = 4
OP_REMOVE = 5
OP_PUT = 6
OP_NEXT_ID = 7
OP_COMMIT = 8

FIELD_KINDS = ("int", "str", "ref", "any")

Schema = tuple[tuple[str, str], ...]


@dataclass
class StoreStats:
    nodes_read: int = 0
    nodes_written: int = 0
    ids_touched: set[int] = field(default_factory=set)


def infer_kind(value) -> str:
    if isinstance(value, Ref):
        return "ref"
    if type(value) is int:
        return "int"
    if type(value) is str:
        return "str"
    return "any"


def _kind_accepts(kind: str, value) -> bool:
    if value is None or kind == "any":
        return True
    return infer_kind(value) == kind


def encode_frame(opcode: int, payload: bytes) -> bytes:
    body = bytes([opcode]) + payload
    return struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))


def read_frames(data: bytes, start: int = len(HEADER)) -> Iterator[tuple[int, int, int, bytes]]:
    """Yield ``(offset, end, opcode, payload)`` for each valid frame.

    Iteration stops at the first frame failing length or checksum checks.
    """
    pos = start
    while pos + 4 <= len(data):
        (length,) = struct.unpack_from("<I", data, pos)
        end = pos + 4 + length + 4
        if length < 1 or end > len(data):
            return
        body = data[pos + 4 : pos + 4 + length]
        (crc,) = struct.unpack_from("<I", data, pos + 4 + length)
        if zlib.crc32(body) != crc:
            return
        yield pos, end, body[0], body[1:]
        pos = end


class _Journal:
    def __init__(self, path: Path, sync: bool):
        self.path = path
        self.sync = sync
        self.fh = open(path, "r+b")
        self.fh.seek(0, os.SEEK_END)

    def append(self, opcode: int, payload: dict) -> None:
        data = json.dumps(payload, separators=(",", ":"), sort_keys=True).encode("utf-8")
        self.fh.write(encode_frame(opcode, data))

    def tell(self) -> int:
        return self.fh.tell()

    def commit(self) -> None:
        self.fh.write(encode_frame(OP_COMMIT, b""))
        self.fh.flush()
        if self.sync:
            os.fsync(self.fh.fileno())

    def truncate(self, offset: int) -> None:
        self.fh.flush()
        self.fh.truncate(offset)
        self.fh.seek(offset)

    def close(self) -> None:
        self.fh.close()


class Store:
    """Node records with id allocation and reference-count bookkeeping.

    Use :meth:`open` with a path for a journal-backed store or with no
    argument for a purely in-memory one. A store is single-owner: one
    operation at a time.
    """

    def __init__(self, *, auto_register: bool = True):
        self.auto_register = auto_register
        self._records: dict[int, NodeRecord] = {}
        self._schemas: dict[str, Schema] = {}
        self._next_id = 1
        self._journal: _Journal | None = None
        self._depth = 0
        self._undo: list[tuple] = []
        self._mark = 0
        self._stats = StoreStats()
        self.closed = False

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def open(cls, path: str | os.PathLike | None = None, *, sync: bool = False,
             auto_register: bool = True) -> Store:
        store = cls(auto_register=auto_register)
        if path is None:
            return store
        path = Path(path)
        if not path.exists() or path.stat().st_size == 0:
            path.write_bytes(HEADER)
        else:
            end = store._replay(path.read_bytes())
            if end != path.stat().st_size:
                logger.warning("dropping %d uncommitted journal bytes in %s",
                               path.stat().st_size - end, path)
                with open(path, "r+b") as fh:
                    fh.truncate(end)
        store._journal = _Journal(path, sync)
        return store

    @classmethod
    def memory(cls, **kwargs) -> Store:
        return cls.open(None, **kwargs)

    @property
    def path(self) -> Path | None:
        return self._journal.path if self._journal else None

    def close(self) -> None:
        if self._depth:
            self.rollback()
        if self._journal:
            self._journal.close()
        self.closed = True

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _replay(self, data: bytes) -> int:
        if len(data) < len(HEADER) or data[:4] != MAGIC:
            raise CorruptJournal("not a gedb journal", 0)
        (version,) = struct.unpack_from("<H", data, 4)
        if version != FORMAT_VERSION:
            raise JournalVersionError(f"unsupported journal version {version}", 4)
        committed_end = len(HEADER)
        pending: list[tuple[int, int, bytes]] = []
        for offset, end, opcode, payload in read_frames(data):
            if opcode == OP_COMMIT:
                for op_offset, op, raw in pending:
                    try:
                        self._apply(op, json.loads(raw))
                    except (StoreError, KeyError, TypeError, ValueError) as exc:
                        raise CorruptJournal(f"cannot replay record: {exc}", op_offset) from None
                pending.clear()
                committed_end = end
            elif OP_SCHEMA <= opcode < OP_COMMIT:
                pending.append((offset, opcode, payload))
            else:
                raise CorruptJournal(f"unknown opcode {opcode}", offset)
        return committed_end

    # -- atomic sections ---------------------------------------------------

    @property
    def in_atomic(self) -> bool:
        return self._depth > 0

    def begin(self) -> None:
        if self._depth == 0:
            self._undo = []
            self._mark = self._journal.tell() if self._journal else 0
        self._depth += 1

    def commit(self) -> None:
        if self._depth == 0:
            raise StoreError("commit without begin")
        self._depth -= 1
        if self._depth == 0:
            if self._journal:
                self._journal.commit()
            self._undo = []

    def rollback(self) -> None:
        """Undo every mutation since the outermost :meth:`begin`."""
        if self._depth == 0:
            raise StoreError("rollback without begin")
        self._undo_to(0)
        self._depth = 0
        if self._journal:
            self._journal.truncate(self._mark)

    def _undo_to(self, mark: int) -> None:
        while len(self._undo) > mark:
            entry = self._undo.pop()
            if entry[0] == "schema":
                del self._schemas[entry[1]]
            else:
                _, nid, prev, next_id = entry
                if prev is None:
                    self._records.pop(nid, None)
                else:
                    self._records[nid] = prev
                self._next_id = next_id

    @contextmanager
    def savepoint(self):
        """Inside an open atomic section, undo only the enclosed mutations on error."""
        if self._depth == 0:
            raise StoreError("savepoint outside an atomic section")
        mark = len(self._undo)
        journal_mark = self._journal.tell() if self._journal else 0
        try:
            yield self
        except BaseException:
            self._undo_to(mark)
            if self._journal:
                self._journal.truncate(journal_mark)
            raise

    @contextmanager
    def atomic(self):
        """Group mutations into one durable unit; roll back on error."""
        self.begin()
        try:
            yield self
        except BaseException:
            self.rollback()
            raise
        self.commit()

    # -- mutation plumbing -------------------------------------------------

    def _mutate(self, opcode: int, payload: dict) -> None:
        auto = self._depth == 0
        if auto:
            self.begin()
        try:
            if opcode == OP_SCHEMA:
                self._undo.append(("schema", payload["type"]))
            else:
                nid = payload.get("id", NULL_ID)
                prev = self._records.get(nid)
                if prev is not None:
                    prev = dataclasses.replace(prev)
                self._undo.append(("rec", nid, prev, self._next_id))
            self._apply(opcode, payload)
            if self._journal:
                self._journal.append(opcode, payload)
        except BaseException:
            if auto:
                self.rollback()
            raise
        if auto:
            self.commit()

    def _apply(self, opcode: int, p: dict) -> None:
        """Apply one journal operation to the in-memory state."""
        if opcode == OP_SCHEMA:
            self._schemas[p["type"]] = tuple((n, k) for n, k in p["fields"])
        elif opcode == OP_ALLOC:
            nid = p["id"]
            if nid < self._next_id or nid in self._records:
                raise StoreError(f"allocation of used id {nid}")
            if p["kind"] == "list":
                body: Body = ListBody()
            else:
                schema = self._schemas[p["type"]]
                body = FixedBody(p["type"], {name: None for name, _ in schema})
            self._records[nid] = NodeRecord(nid, 0, 0, body)
            self._next_id = nid + 1
        elif opcode == OP_BODY:
            rec = self._records[p["id"]]
            rec.body = decode_body(p["body"])
        elif opcode == OP_COUNTER:
            rec = self._records[p["id"]]
            value = getattr(rec, p["c"]) + p["d"]
            if value < 0:
                raise InvariantViolation(f"{p['c']} underflow on node {p['id']}")
            setattr(rec, p["c"], value)
        elif opcode == OP_REMOVE:
            del self._records[p["id"]]
        elif opcode == OP_PUT:
            nid = p["id"]
            self._records[nid] = NodeRecord(nid, p["orc"], p["irc"], decode_body(p["body"]))
            self._next_id = max(self._next_id, nid + 1)
        elif opcode == OP_NEXT_ID:
            if p["next"] < self._next_id:
                raise StoreError("allocator cannot move backwards")
            self._next_id = p["next"]
        else:
            raise StoreError(f"unknown opcode {opcode}")

    def _touch_read(self, nid: int) -> None:
        self._stats.nodes_read += 1
        self._stats.ids_touched.add(nid)

    def _touch_write(self, nid: int) -> None:
        self._stats.nodes_written += 1
        self._stats.ids_touched.add(nid)

    def _record(self, nid: int) -> NodeRecord:
        if type(nid) is not int or nid <= 0:
            raise ValueError(f"node id must be a positive integer, got {nid!r}")
        try:
            return self._records[nid]
        except KeyError:
            raise NodeNotFound(nid) from None

    # -- schemas -----------------------------------------------------------

    def register_type(self, type_name: str, fields: Sequence[tuple[str, str]]) -> None:
        fields = tuple((str(n), str(k)) for n, k in fields)
        names = [n for n, _ in fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in schema for {type_name}")
        bad = [k for _, k in fields if k not in FIELD_KINDS]
        if bad:
            raise SchemaError(f"unknown field kinds {bad} for {type_name}")
        existing = self._schemas.get(type_name)
        if existing is not None:
            if existing != fields:
                raise SchemaError(f"type {type_name} is already registered with another schema")
            return
        self._mutate(OP_SCHEMA, {"type": type_name, "fields": [list(f) for f in fields]})

    def schema(self, type_name: str) -> Schema | None:
        return self._schemas.get(type_name)

    @property
    def schemas(self) -> dict[str, Schema]:
        return dict(self._schemas)

    # -- node operations ---------------------------------------------------

    @property
    def next_id(self) -> int:
        return self._next_id

    def __len__(self) -> int:
        return len(self._records)

    node_count = __len__

    def __contains__(self, nid: int) -> bool:
        return nid in self._records

    def ids(self) -> list[int]:
        return sorted(self._records)

    def allocate_node(self, kind: str, type_name: str | None = None,
                      schema: Sequence[tuple[str, str]] | None = None) -> int:
        """Create an empty record with ``orc = irc = 0`` and return its id."""
        if kind == "list":
            payload = {"id": self._next_id, "kind": "list"}
        elif kind == "fixed":
            if not type_name:
                raise SchemaError("fixed nodes need a type name")
            if type_name not in self._schemas:
                if schema is None or not self.auto_register:
                    raise SchemaError(f"unknown type {type_name}")
                self.register_type(type_name, schema)
            payload = {"id": self._next_id, "kind": "fixed", "type": type_name}
        else:
            raise ValueError(f"unknown node kind {kind!r}")
        nid = self._next_id
        self._mutate(OP_ALLOC, payload)
        self._touch_write(nid)
        return nid

    def read_node(self, nid: int) -> NodeRecord | None:
        """Return a copy of the record, or ``None`` if it does not exist."""
        try:
            rec = self._record(nid)
        except NodeNotFound:
            return None
        self._touch_read(nid)
        return rec.copy()

    def kind_of(self, nid: int) -> tuple[str, str | None]:
        rec = self._record(nid)
        self._touch_read(nid)
        if isinstance(rec.body, FixedBody):
            return "fixed", rec.body.type_name
        return "list", None

    def _normalize(self, rec: NodeRecord, body: Body) -> Body:
        for v in body.values():
            if isinstance(v, Ref) and isinstance(v.target, MemNode):
                raise SchemaError("stored bodies hold node ids, not in-memory nodes")
        if isinstance(rec.body, ListBody):
            if not isinstance(body, ListBody):
                raise SchemaError(f"node {rec.id} is a list node")
            return body.copy()
        if not isinstance(body, FixedBody) or body.type_name != rec.body.type_name:
            raise SchemaError(f"node {rec.id} is a fixed node of type {rec.body.type_name}")
        schema = self._schemas[body.type_name]
        if set(body.fields) != {n for n, _ in schema}:
            raise SchemaError(
                f"fields {sorted(body.fields)} do not match type {body.type_name} "
                f"({[n for n, _ in schema]})")
        for name, kind in schema:
            if not _kind_accepts(kind, body.fields[name]):
                raise SchemaError(f"field {body.type_name}.{name} holds {kind} values")
        return FixedBody(body.type_name, {n: body.fields[n] for n, _ in schema})

    def write_body(self, nid: int, body: Body) -> None:
        """Replace the whole body of a record; counters are left alone."""
        rec = self._record(nid)
        body = self._normalize(rec, body)
        self._mutate(OP_BODY, {"id": nid, "body": encode_body(body)})
        self._touch_write(nid)

    def child_ids(self, nid: int) -> list[int]:
        """Ids of non-null, existing children, one entry per reference."""
        rec = self._record(nid)
        self._touch_read(nid)
        return [v.target for v in rec.body.values()
                if isinstance(v, Ref) and v.target != NULL_ID and v.target in self._records]

    def _counter(self, nid: int, which: str, delta: int) -> None:
        rec = self._record(nid)
        if getattr(rec, which) + delta < 0:
            raise InvariantViolation(f"{which} underflow on node {nid}")
        self._mutate(OP_COUNTER, {"id": nid, "c": which, "d": delta})
        self._touch_write(nid)

    def incr_orc(self, nid: int) -> None:
        self._counter(nid, "orc", 1)

    def decr_orc(self, nid: int) -> None:
        self._counter(nid, "orc", -1)

    def incr_irc(self, nid: int) -> None:
        self._counter(nid, "irc", 1)

    def decr_irc(self, nid: int) -> None:
        self._counter(nid, "irc", -1)

    def read_orc(self, nid: int) -> int:
        rec = self._record(nid)
        self._touch_read(nid)
        return rec.orc

    def read_irc(self, nid: int) -> int:
        rec = self._record(nid)
        self._touch_read(nid)
        return rec.irc

    def remove_node(self, nid: int) -> None:
        """Delete a record. Children's counters are the caller's business."""
        self._record(nid)
        self._mutate(OP_REMOVE, {"id": nid})
        self._touch_write(nid)

    def all_persistent_roots(self) -> set[int]:
        return {nid for nid, rec in self._records.items() if rec.orc > 0}

    # -- whole-store access ------------------------------------------------

    def iter_records(self) -> Iterator[NodeRecord]:
        """Copies of all records in id order. Not instrumented."""
        for nid in sorted(self._records):
            yield self._records[nid].copy()

    def snapshot(self) -> Snapshot:
        return Snapshot({nid: rec.copy() for nid, rec in self._records.items()})

    def restore(self, snap: Snapshot, next_id: int | None = None) -> None:
        """Load a snapshot into an empty store, keeping ids."""
        if self._records or self._next_id != 1:
            raise StoreError("restore requires an empty store")
        with self.atomic():
            for type_name, schema in sorted(_infer_schemas(snap).items()):
                if type_name in self._schemas:
                    if self._schemas[type_name] != schema:
                        raise SchemaError(f"snapshot conflicts with schema of {type_name}")
                else:
                    self.register_type(type_name, schema)
            top = 0
            for nid in sorted(snap.records):
                rec = snap.records[nid]
                top = max(top, nid, *(v.target for v in rec.body.values() if isinstance(v, Ref)))
                if isinstance(rec.body, FixedBody):
                    probe = NodeRecord(nid, 0, 0, FixedBody(rec.body.type_name))
                    body = self._normalize(probe, rec.body)
                else:
                    body = rec.body.copy()
                self._mutate(OP_PUT, {"id": nid, "orc": rec.orc, "irc": rec.irc,
                                      "body": encode_body(body)})
            wanted = top + 1 if next_id is None else next_id
            if wanted > self._next_id:
                self._mutate(OP_NEXT_ID, {"next": wanted})

    def compact(self) -> None:
        """Rewrite the journal as a single committed snapshot."""
        if self._journal is None:
            return
        if self._depth:
            raise StoreError("cannot compact inside an atomic section")
        path = self._journal.path
        tmp = path.with_name(path.name + ".compact")
        with open(tmp, "wb") as fh:
            fh.write(HEADER)
            for type_name, schema in sorted(self._schemas.items()):
                payload = {"type": type_name, "fields": [list(f) for f in schema]}
                fh.write(encode_frame(OP_SCHEMA, _compact_json(payload)))
            for rec in self.iter_records():
                payload = {"id": rec.id, "orc": rec.orc, "irc": rec.irc,
                           "body": encode_body(rec.body)}
                fh.write(encode_frame(OP_PUT, _compact_json(payload)))
            fh.write(encode_frame(OP_NEXT_ID, _compact_json({"next": self._next_id})))
            fh.write(encode_frame(OP_COMMIT, b""))
            fh.flush()
            os.fsync(fh.fileno())
        sync = self._journal.sync
        self._journal.close()
        os.replace(tmp, path)
        self._journal = _Journal(path, sync)

    # -- instrumentation ---------------------------------------------------

    def stats_reset(self) -> None:
        self._stats = StoreStats()

    def stats_read(self) -> StoreStats:
        s = self._stats
        return StoreStats(s.nodes_read, s.nodes_written, set(s.ids_touched))


def _compact_json(payload: dict) -> bytes:
    return json.dumps(payload, separators=(",", ":"), sort_keys=True).encode("utf-8")


def _infer_schemas(snap: Snapshot) -> dict[str, Schema]:
    """Field kinds per fixed type, taken from the values present."""
    found: dict[str, dict[str, str]] = {}
    for rec in snap.records.values():
        body = rec.body
        if not isinstance(body, FixedBody):
            continue
        kinds = found.setdefault(body.type_name, {n: "any" for n in sorted(body.fields)})
        if set(kinds) != set(body.fields):
            raise SchemaError(f"nodes of type {body.type_name} disagree on their fields")
        for name, value in body.fields.items():
            kind = infer_kind(value)
            if kind == "any":
                continue
            if kinds[name] not in ("any", kind):
                raise SchemaError(f"field {body.type_name}.{name} mixes value kinds")
            kinds[name] = kind
    return {t: tuple(sorted(k.items())) for t, k in found.items()}
