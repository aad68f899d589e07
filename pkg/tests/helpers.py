"""Fixture builders shared by the unit and acceptance tests."""

from __future__ import annotations

import random

from gedb import oracle
from gedb.engine import Engine, GcStrategy
from gedb.model import NULL_REF, ListBody, MemNode, NodeRecord, Ref, Snapshot, fixed_node, list_node
from gedb.store import Store


def person(name: str, age: int = 0, r1=NULL_REF, r2=NULL_REF) -> MemNode:
    return fixed_node("P", name=name, age=age, r1=r1, r2=r2)


def ids_by_name(store: Store) -> dict[str, int]:
    return {rec.body.fields["name"]: rec.id for rec in store.iter_records()
            if rec.body.kind == "fixed" and "name" in rec.body.fields}


def build_two_root_cycle(store: Store, *, x2_to_c: bool) -> dict[str, int]:
    """A(orc 1) -> B, cycle B -> C -> D -> B, C -> E; X1(orc 1) -> X2, optionally X2 -> C."""
    e = person("E", 20)
    d = person("D")
    c = person("C", r2=e)
    b = person("B", r1=c)
    c["r1"] = d
    d["r1"] = b
    a = person("A", r1=b)
    x2 = person("X2", r1=c if x2_to_c else NULL_REF)
    x1 = person("X1", r1=x2)
    Engine(store).embed_multi([a, x1])
    return ids_by_name(store)


def rewire_a_through_f(store: Store, ids: dict[str, int]):
    """Load A, point it at a new F that refers to E, set E.age to 25, embed A."""
    engine = Engine(store)
    g = engine.load(ids["A"])
    a = g.roots[0]
    e = a.target("r1").target("r1").target("r2")
    assert e["name"] == "E"
    a["r1"] = person("F", r1=e)
    e["age"] = 25
    return engine.embed(a)


def chain_store(extra_referrer: bool) -> tuple[Store, dict[str, int]]:
    """A(orc 1) -> B -> C, optionally an anchored Y -> B."""
    store = Store.memory()
    c = person("C")
    b = person("B", r1=c)
    roots = [person("A", r1=b)]
    if extra_referrer:
        roots.append(person("Y", r1=b))
    Engine(store).embed_multi(roots)
    return store, ids_by_name(store)


def random_dag_snapshot(rng: random.Random, n: int) -> Snapshot:
    """List nodes 1..n with edges only to higher ids; the anchored ones keep the rest alive."""
    children = {i: [j for j in range(i + 1, n + 1) if rng.random() < 2.5 / n] for i in range(1, n + 1)}
    anchored = {i for i in range(1, n + 1) if i == 1 or rng.random() < 0.1}
    live, todo = set(anchored), list(anchored)
    while todo:
        for c in children[todo.pop()]:
            if c not in live:
                live.add(c)
                todo.append(c)
    irc = {i: 0 for i in live}
    for i in live:
        for c in children[i]:
            irc[c] += 1
    return Snapshot({i: NodeRecord(i, int(i in anchored), irc[i], ListBody([Ref(c) for c in children[i]]))
                     for i in sorted(live)})


def store_from(snap: Snapshot) -> Store:
    store = Store.memory()
    store.restore(snap)
    return store


def detach_some(store: Store, rng: random.Random) -> MemNode:
    """A gray copy of one live list node with some of its edges dropped."""
    parents = [i for i in store.ids() if store.child_ids(i)] or store.ids()
    nid = rng.choice(parents)
    rec = store.read_node(nid)
    kept = [v for v in rec.body.items if rng.random() < 0.4]
    return list_node(*kept, id=nid)


def closure_of(store: Store, seeds) -> set[int]:
    seen = {s for s in seeds if s in store}
    todo = list(seen)
    while todo:
        for c in store.child_ids(todo.pop()):
            if c not in seen:
                seen.add(c)
                todo.append(c)
    return seen


def export_bytes(store: Store) -> bytes:
    from gedb.model import serialize_dump
    return serialize_dump(store.snapshot()).encode("utf-8")


__all__ = ["person", "ids_by_name", "build_two_root_cycle", "rewire_a_through_f", "chain_store", "random_dag_snapshot",
           "store_from", "detach_some", "closure_of", "export_bytes", "oracle", "GcStrategy"]
