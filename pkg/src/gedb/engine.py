"""Declarative update of a store from a modified in-memory graph.

``embed`` runs two phases. The update phase copies the in-memory graph into
the store node by node and keeps the internal reference counts exact; as a
side effect it records *seed* ids, stored nodes that lost an incoming
reference. The garbage-collection phase then examines only the region Z
reachable from the seeds:

1. walk Z once per edge and count, for each node, the references that come
   from inside Z;
2. a node whose in-Z count is below ``orc + irc`` is referenced from
   outside Z (or is a root) and is live;
3. everything reachable from a live node is live;
4. whatever is left is garbage, cycles included, and is deleted.

Nodes outside Z are never read.
"""

from __future__ import annotations

import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from gedb.errors import (
    DuplicateIdError,
    EngineError,
    InvariantViolation,
    NodeNotFound,
    TransactionError,
    UnresolvedNodeError,
    UnsafeHintError,
)
from gedb.model import (
    NULL_ID,
    NULL_REF,
    Body,
    FixedBody,
    ListBody,
    MemGraph,
    MemNode,
    Ref,
)
from gedb.store import Store, infer_kind

POLICIES = ("always-false", "orc-positive", "hint-set")


@dataclass(frozen=True)
class GcStrategy:
    """How the collector decides a node is certainly live, and which collector runs.

    ``hint-set`` trusts ``hints`` blindly: listing a node that is in fact
    garbage leaks it and everything only it keeps alive.
    """

    policy: str = "always-false"
    hints: frozenset[int] = frozenset()
    acyclic: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        object.__setattr__(self, "hints", frozenset(self.hints))

    def certainly_not_garbage(self, store: Store, nid: int) -> bool:
        if self.policy == "orc-positive":
            return store.read_orc(nid) > 0
        if self.policy == "hint-set":
            return nid in self.hints
        return False


DEFAULT_STRATEGY = GcStrategy()


@dataclass
class UpdateState:
    white_nodes: list[MemNode] = field(default_factory=list)
    gray_nodes: list[MemNode] = field(default_factory=list)
    seed_garbage_ids: set[int] = field(default_factory=set)
    # (node, id it carried before this update) for every id binding made
    rebound: list[tuple[MemNode, int]] = field(default_factory=list)

    def unbind(self) -> None:
        for node, old in reversed(self.rebound):
            node.id = old
        self.rebound.clear()


@dataclass
class GcState:
    internal_ref_counts: dict[int, int] = field(default_factory=dict)
    ids_ref_outside: set[int] = field(default_factory=set)


@dataclass
class EmbedReport:
    allocated: list[int] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"allocated": sorted(self.allocated), "removed": sorted(self.removed)}


# ---------------------------------------------------------------------------
# update phase


def multiset_disjoint(c1: Sequence[int], c2: Sequence[int]) -> tuple[list[int], list[int], set[int]]:
    """Cancel common occurrences of two id multisets.

    For each id occurring ``m = min(count in c1, count in c2) > 0`` times in
    both, its first ``m`` occurrences are dropped from each list and the id
    goes into the returned intersection set. Order of the survivors is kept.
    """
    n1, n2 = Counter(c1), Counter(c2)
    common = {i: min(n1[i], n2[i]) for i in n1.keys() & n2.keys()}

    def strip(seq):
        left = dict(common)
        out = []
        for i in seq:
            if left.get(i, 0):
                left[i] -= 1
            else:
                out.append(i)
        return out

    return strip(c1), strip(c2), set(common)


def mem_child_ids(p: MemNode) -> list[int]:
    """Ids of the non-null children of an in-memory node, one per reference."""
    out = []
    for v in p.body.values():
        if isinstance(v, Ref):
            t = v.target
            nid = t.id if isinstance(t, MemNode) else t
            if nid != NULL_ID:
                out.append(nid)
    return out


def _schema_for(body: FixedBody) -> list[tuple[str, str]]:
    return [(name, infer_kind(v)) for name, v in body.fields.items()]


def _allocate_for(store: Store, p: MemNode) -> int:
    if isinstance(p.body, FixedBody):
        return store.allocate_node("fixed", p.body.type_name, _schema_for(p.body))
    return store.allocate_node("list")


def collect_white_and_gray(store: Store, roots: Iterable[MemNode], *, lenient: bool = False,
                           state: UpdateState | None = None) -> UpdateState:
    """Split the reachable in-memory nodes into white and gray lists.

    Every white node gets a fresh empty record and its id bound on the way.
    With ``lenient`` a gray node whose record no longer exists is saved as a
    new node instead of being an error.
    """
    state = state if state is not None else UpdateState()
    seen: set[int] = set()
    owner: dict[int, MemNode] = {}
    queue: deque[MemNode] = deque()
    for r in roots:
        if r is None:
            raise EngineError("cannot embed a null root")
        if id(r) not in seen:
            seen.add(id(r))
            queue.append(r)
    while queue:
        p = queue.popleft()
        if p.id == NULL_ID or (lenient and p.id not in store):
            old = p.id
            p.id = _allocate_for(store, p)
            state.rebound.append((p, old))
            state.white_nodes.append(p)
        else:
            if p.id not in store:
                raise UnresolvedNodeError(p.id)
            other = owner.get(p.id)
            if other is not None:
                raise DuplicateIdError(
                    f"two in-memory nodes ({other!r} and {p!r}) carry id {p.id}")
            owner[p.id] = p
            state.gray_nodes.append(p)
        for v in p.body.values():
            if not isinstance(v, Ref):
                continue
            t = v.target
            if isinstance(t, MemNode):
                if id(t) not in seen:
                    seen.add(id(t))
                    queue.append(t)
            elif t != NULL_ID and t not in store:
                raise UnresolvedNodeError(t)
    return state


def apply_white_ref_deltas(store: Store, p: MemNode) -> None:
    for nid in mem_child_ids(p):
        store.incr_irc(nid)


def apply_gray_ref_deltas(store: Store, p: MemNode, state: UpdateState,
                          strategy: GcStrategy = DEFAULT_STRATEGY) -> None:
    """Adjust counters for the change of one gray node's outgoing references.

    Must run before the stored body of ``p`` is overwritten. Each counter is
    only incremented or only decremented, never both.
    """
    new_refs = mem_child_ids(p)
    old_refs = store.child_ids(p.id)
    new_only, old_only, kept = multiset_disjoint(new_refs, old_refs)
    for nid in old_only:
        store.decr_irc(nid)
        if nid in kept:
            continue
        if not strategy.certainly_not_garbage(store, nid):
            state.seed_garbage_ids.add(nid)
    for nid in new_only:
        store.incr_irc(nid)


def stored_body(p: MemNode) -> Body:
    """Flat copy of an in-memory body: referenced nodes become their ids."""

    def conv(v):
        if isinstance(v, Ref) and isinstance(v.target, MemNode):
            return Ref(v.target.id)
        return v

    if isinstance(p.body, FixedBody):
        return FixedBody(p.body.type_name, {k: conv(v) for k, v in p.body.fields.items()})
    return ListBody([conv(v) for v in p.body.items])


def copy_contents(store: Store, state: UpdateState) -> None:
    for p in state.white_nodes:
        store.write_body(p.id, stored_body(p))
    for p in state.gray_nodes:
        store.write_body(p.id, stored_body(p))


def update(store: Store, roots: Sequence[MemNode], strategy: GcStrategy = DEFAULT_STRATEGY, *,
           lenient: bool = False, state: UpdateState | None = None,
           rng: random.Random | None = None) -> UpdateState:
    """Update phase: copy the graph in and keep counters exact.

    Every root that was white becomes a persistent root (orc + 1). A gray
    root keeps its orc, so it can disappear if it lost its last referrer.
    """
    state = state if state is not None else UpdateState()
    white_roots = []
    for r in roots:
        if r is not None and r.id == NULL_ID and all(r is not w for w in white_roots):
            white_roots.append(r)
    collect_white_and_gray(store, roots, lenient=lenient, state=state)
    whites, grays = state.white_nodes, state.gray_nodes
    if rng is not None:
        whites, grays = list(whites), list(grays)
        rng.shuffle(whites)
        rng.shuffle(grays)
    for p in whites:
        apply_white_ref_deltas(store, p)
    for p in grays:
        apply_gray_ref_deltas(store, p, state, strategy)
    copy_contents(store, UpdateState(whites, grays))
    for r in white_roots:
        store.incr_orc(r.id)
    return state


# ---------------------------------------------------------------------------
# garbage collection phase


def _order(ids: Iterable[int], rng: random.Random | None) -> list[int]:
    out = sorted(ids)
    if rng is not None:
        rng.shuffle(out)
    return out


def walk_z(store: Store, gc: GcState, seeds: Iterable[int],
           strategy: GcStrategy = DEFAULT_STRATEGY, rng: random.Random | None = None) -> None:
    """Count, for every node of Z, the references it receives from inside Z.

    Each seed is entered once without a real edge, so one is subtracted from
    its count after its walk. Certainly-live nodes are not entered.
    """
    counts = gc.internal_ref_counts
    for seed in _order(seeds, rng):
        if strategy.certainly_not_garbage(store, seed):
            continue
        queue = deque([seed])
        while queue:
            nid = queue.popleft()
            if nid != seed and strategy.certainly_not_garbage(store, nid):
                continue
            if nid in counts:
                counts[nid] += 1
                continue
            counts[nid] = 1
            queue.extend(store.child_ids(nid))
        counts[seed] -= 1


def find_externally_referenced(store: Store, gc: GcState) -> None:
    for nid, count in gc.internal_ref_counts.items():
        irc = store.read_irc(nid)
        if count > irc:
            raise InvariantViolation(
                f"node {nid} receives {count} references inside Z but has irc={irc}")
        if count < store.read_orc(nid) + irc:
            gc.ids_ref_outside.add(nid)


def subtract_non_garbage(store: Store, gc: GcState, rng: random.Random | None = None) -> None:
    """Drop from the count map every node reachable from a live node of Z."""
    counts = gc.internal_ref_counts
    queue = deque(_order(gc.ids_ref_outside, rng))
    while queue:
        nid = queue.popleft()
        if counts.pop(nid, None) is None:
            continue
        queue.extend(store.child_ids(nid))


def delete_garbage(store: Store, gc: GcState, rng: random.Random | None = None) -> set[int]:
    """Remove the nodes left in the count map.

    References from garbage to survivors are released; references between
    garbage nodes need no bookkeeping.
    """
    garbage = gc.internal_ref_counts
    for nid in _order(garbage, rng):
        for child in store.child_ids(nid):
            if child not in garbage:
                store.decr_irc(child)
        store.remove_node(nid)
    return set(garbage)


def garbage_collect(store: Store, seeds: Iterable[int], strategy: GcStrategy = DEFAULT_STRATEGY,
                    rng: random.Random | None = None) -> set[int]:
    seeds = {s for s in seeds if s in store}
    if not seeds:
        return set()
    if strategy.acyclic:
        return gc_acyclic(store, seeds)
    gc = GcState()
    walk_z(store, gc, seeds, strategy, rng)
    find_externally_referenced(store, gc)
    subtract_non_garbage(store, gc, rng)
    return delete_garbage(store, gc, rng)


def gc_acyclic(store: Store, seeds: Iterable[int]) -> set[int]:
    """Cascade deletion of seeds whose counters are both zero.

    Only correct when no garbage cycle exists; cyclic garbage is left in
    the store.
    """
    pending = {s for s in seeds if s in store}
    removed: set[int] = set()
    while True:
        victim = next((s for s in sorted(pending)
                       if store.read_orc(s) == 0 and store.read_irc(s) == 0), None)
        if victim is None:
            return removed
        for child in store.child_ids(victim):
            store.decr_irc(child)
            pending.add(child)
        pending.discard(victim)
        store.remove_node(victim)
        removed.add(victim)
        pending = {s for s in pending if s in store}


# ---------------------------------------------------------------------------
# loader


def load(store: Store, nid: int) -> MemGraph:
    """Materialize the closure of a stored node.

    Each stored node becomes exactly one MemNode, so sharing and cycles are
    preserved. References to missing records load as null.
    """
    if store.read_node(nid) is None:
        raise NodeNotFound(nid)
    nodes: dict[int, MemNode] = {}
    bodies: dict[int, Body] = {}
    queue = deque([nid])
    while queue:
        cur = queue.popleft()
        if cur in nodes:
            continue
        rec = store.read_node(cur)
        nodes[cur] = MemNode(ListBody(), cur)
        bodies[cur] = rec.body
        for v in rec.body.values():
            if isinstance(v, Ref) and v.target != NULL_ID and v.target not in nodes \
                    and v.target in store:
                queue.append(v.target)

    def conv(v):
        if isinstance(v, Ref):
            return Ref(nodes[v.target]) if v.target in nodes else NULL_REF
        return v

    for cur, body in bodies.items():
        if isinstance(body, FixedBody):
            nodes[cur].body = FixedBody(body.type_name, {k: conv(v) for k, v in body.fields.items()})
        else:
            nodes[cur].body = ListBody([conv(v) for v in body.items])
    root = nodes[nid]
    return MemGraph([root], {f"n{i}": n for i, n in nodes.items()})


# ---------------------------------------------------------------------------
# public facade


class Engine:
    """Embed and the tool operations over one store.

    Outside a transaction each public method is one atomic unit: on error
    the store and any ids bound to in-memory nodes are restored.
    """

    def __init__(self, store: Store, strategy: GcStrategy = DEFAULT_STRATEGY, *,
                 lenient: bool = False, check_hints: bool = False,
                 rng: random.Random | None = None):
        self.store = store
        self.strategy = strategy
        self.lenient = lenient
        self.check_hints = check_hints
        self.rng = rng
        self._txn: UpdateState | None = None
        self._txn_allocated: list[int] = []
        self._txn_removed: set[int] = set()

    @property
    def in_transaction(self) -> bool:
        return self._txn is not None

    def _strategy(self, strategy: GcStrategy | None) -> GcStrategy:
        return self.strategy if strategy is None else strategy

    def embed(self, root: MemNode, strategy: GcStrategy | None = None) -> EmbedReport:
        if root is None:
            raise EngineError("cannot embed a null root")
        return self.embed_multi([root], strategy)

    def embed_multi(self, roots: Sequence[MemNode], strategy: GcStrategy | None = None) -> EmbedReport:
        if not roots:
            raise EngineError("embed needs at least one root")
        strategy = self._strategy(strategy)
        state = UpdateState()
        if self._txn is not None:
            try:
                with self.store.savepoint():
                    update(self.store, roots, strategy, lenient=self.lenient, state=state,
                           rng=self.rng)
            except BaseException:
                state.unbind()
                raise
            self._txn.seed_garbage_ids |= state.seed_garbage_ids
            self._txn.rebound.extend(state.rebound)
            allocated = [p.id for p in state.white_nodes]
            self._txn_allocated.extend(allocated)
            return EmbedReport(allocated, [])
        try:
            with self.store.atomic():
                update(self.store, roots, strategy, lenient=self.lenient, state=state, rng=self.rng)
                removed = self.collect(state.seed_garbage_ids, strategy)
        except BaseException:
            state.unbind()
            raise
        return EmbedReport([p.id for p in state.white_nodes], sorted(removed))

    def update(self, roots: Sequence[MemNode], strategy: GcStrategy | None = None) -> UpdateState:
        """Run only the update phase (no atomic wrapper, no collection)."""
        return update(self.store, roots, self._strategy(strategy), lenient=self.lenient,
                      rng=self.rng)

    def collect(self, seeds: Iterable[int], strategy: GcStrategy | None = None) -> set[int]:
        strategy = self._strategy(strategy)
        if self.check_hints and strategy.policy == "hint-set":
            from gedb.oracle import full_gc_survivors

            live = full_gc_survivors(self.store)
            unsafe = sorted(h for h in strategy.hints if h in self.store and h not in live)
            if unsafe:
                raise UnsafeHintError(f"hinted ids are garbage: {unsafe}")
        return garbage_collect(self.store, seeds, strategy, self.rng)

    def load(self, nid: int) -> MemGraph:
        return load(self.store, nid)

    def anchor(self, nid: int) -> None:
        self.store.incr_orc(nid)

    def unanchor(self, nid: int, strategy: GcStrategy | None = None) -> EmbedReport:
        strategy = self._strategy(strategy)
        if self.store.read_orc(nid) == 0:
            raise EngineError(f"node {nid} is not anchored")

        def body():
            self.store.decr_orc(nid)
            if strategy.certainly_not_garbage(self.store, nid):
                return set()
            return {nid}

        return self._tool_op(body, strategy)

    def force_delete(self, nid: int, strategy: GcStrategy | None = None) -> EmbedReport:
        """Remove a node whoever refers to it; referrers now hold dangling ids."""
        strategy = self._strategy(strategy)
        if nid not in self.store:
            raise NodeNotFound(nid)

        def body():
            seeds = set()
            for child in self.store.child_ids(nid):
                self.store.decr_irc(child)
                seeds.add(child)
            self.store.remove_node(nid)
            seeds.discard(nid)
            return seeds

        report = self._tool_op(body, strategy)
        report.removed = sorted({nid, *report.removed})
        if self._txn is not None:
            self._txn_removed.add(nid)
        return report

    def _tool_op(self, body, strategy: GcStrategy) -> EmbedReport:
        if self._txn is not None:
            with self.store.savepoint():
                seeds = body()
            self._txn.seed_garbage_ids |= seeds
            return EmbedReport()
        with self.store.atomic():
            seeds = body()
            removed = self.collect(seeds, strategy)
        return EmbedReport([], sorted(removed))

    # -- transactions ------------------------------------------------------

    def begin_transaction(self) -> None:
        if self._txn is not None:
            raise TransactionError("transactions do not nest")
        self.store.begin()
        self._txn = UpdateState()
        self._txn_allocated = []
        self._txn_removed = set()

    def end_transaction(self, strategy: GcStrategy | None = None) -> EmbedReport:
        """Collect garbage over every seed of the transaction and commit."""
        if self._txn is None:
            raise TransactionError("no open transaction")
        txn = self._txn
        try:
            removed = self.collect(txn.seed_garbage_ids, strategy)
        except BaseException:
            self.rollback()
            raise
        self.store.commit()
        self._txn = None
        return EmbedReport(list(self._txn_allocated), sorted(removed | self._txn_removed))

    def rollback(self) -> None:
        if self._txn is None:
            raise TransactionError("no open transaction")
        self.store.rollback()
        self._txn.unbind()
        self._txn = None


def embed(store: Store, root: MemNode, strategy: GcStrategy = DEFAULT_STRATEGY) -> EmbedReport:
    return Engine(store, strategy).embed(root)


def embed_multi(store: Store, roots: Sequence[MemNode],
                strategy: GcStrategy = DEFAULT_STRATEGY) -> EmbedReport:
    return Engine(store, strategy).embed_multi(roots)
