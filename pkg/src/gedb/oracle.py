"""Brute-force reference checks and randomized differential scenarios.

Nothing here writes to the store it inspects except the reference path of
:func:`run_scenario`, which owns its own store.
"""

from __future__ import annotations

import json
import random
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from typing import Any

from gedb import engine as eng
from gedb.errors import GedbError
from gedb.model import NULL_ID, NULL_REF, FixedBody, MemNode, Ref, fixed_node, list_node
from gedb.store import Store

# ---------------------------------------------------------------------------
# whole-store oracles


def _edges(store: Store) -> dict[int, list[int]]:
    present = set(store.ids())
    return {
        rec.id: [v.target for v in rec.body.values()
                 if isinstance(v, Ref) and v.target != NULL_ID and v.target in present]
        for rec in store.iter_records()
    }


def full_gc_survivors(store: Store) -> set[int]:
    """Ids reachable from any node with ``orc > 0``, found by full traversal."""
    edges = _edges(store)
    live = set(store.all_persistent_roots())
    queue = deque(sorted(live))
    while queue:
        for child in edges[queue.popleft()]:
            if child not in live:
                live.add(child)
                queue.append(child)
    return live


def recompute_all_irc(store: Store) -> dict[int, int]:
    """Reference occurrences to each stored id, counted over every body."""
    edges = _edges(store)
    counts = Counter(c for children in edges.values() for c in children)
    return {nid: counts[nid] for nid in edges}


@dataclass
class CheckResult:
    irc_mismatch: dict[int, tuple[int, int]] = field(default_factory=dict)
    unreachable: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.irc_mismatch and not self.unreachable

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "irc_mismatch": [{"id": i, "stored": s, "expected": e}
                             for i, (s, e) in sorted(self.irc_mismatch.items())],
            "unreachable": self.unreachable,
        }


def check_store(store: Store) -> CheckResult:
    """irc exactness plus persistence soundness and completeness."""
    expected = recompute_all_irc(store)
    result = CheckResult()
    for rec in store.iter_records():
        if rec.irc != expected[rec.id]:
            result.irc_mismatch[rec.id] = (rec.irc, expected[rec.id])
    live = full_gc_survivors(store)
    result.unreachable = sorted(set(store.ids()) - live)
    return result


def diff_stores(a: Store, b: Store) -> str | None:
    """First difference in ids, bodies, orc or irc; ``None`` if identical."""
    ids_a, ids_b = set(a.ids()), set(b.ids())
    if ids_a != ids_b:
        return (f"id sets differ: only engine {sorted(ids_a - ids_b)}, "
                f"only reference {sorted(ids_b - ids_a)}")
    for ra, rb in zip(a.iter_records(), b.iter_records()):
        for attr in ("orc", "irc", "body"):
            if getattr(ra, attr) != getattr(rb, attr):
                return (f"node {ra.id}: {attr} engine={getattr(ra, attr)!r} "
                        f"reference={getattr(rb, attr)!r}")
    return None


# ---------------------------------------------------------------------------
# scenarios

TYPE_NAME = "N"
REF_FIELDS = ("a", "b", "c")


@dataclass
class ScenarioParams:
    max_nodes: int = 50
    steps: int = 20
    edge_density: float = 0.4
    policy: str = "always-false"


@dataclass
class Scenario:
    rng_seed: int
    params: ScenarioParams = field(default_factory=ScenarioParams)
    steps: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rng_seed": self.rng_seed, "params": asdict(self.params),
                           "steps": self.steps}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Scenario:
        doc = json.loads(text)
        return cls(doc["rng_seed"], ScenarioParams(**doc.get("params", {})), doc["steps"])


@dataclass
class Verdict:
    ok: bool
    scenario: Scenario
    steps_run: int = 0
    divergence: str | None = None
    failed_step: int | None = None

    def to_json(self) -> dict:
        return {"ok": self.ok, "seed": self.scenario.rng_seed, "steps_run": self.steps_run,
                "failed_step": self.failed_step, "divergence": self.divergence}


class _Builder:
    """Materializes one embed step against a given store."""

    def __init__(self, store: Store, step: dict):
        self.store = store
        self.nodes: dict[tuple, MemNode] = {}
        if step.get("load") is not None:
            graph = eng.load(store, step["load"])
            for node in graph.closure():
                self.nodes[("id", node.id)] = node

    def node(self, addr) -> MemNode:
        key = tuple(addr)
        if key not in self.nodes:
            raise KeyError(f"address {list(addr)} not in the loaded graph")
        return self.nodes[key]

    def value(self, enc):
        tag = enc[0]
        if tag == "none":
            return None
        if tag == "null":
            return NULL_REF
        if tag in ("int", "str"):
            return enc[1]
        if tag == "db":
            return Ref(enc[1])
        if tag == "node":
            return Ref(self.node(enc[1]))
        raise ValueError(f"bad value encoding {enc!r}")

    def apply(self, edit: list) -> None:
        op = edit[0]
        if op == "new":
            _, k, kind = edit
            if kind == "fixed":
                node = fixed_node(TYPE_NAME, a=NULL_REF, b=NULL_REF, c=NULL_REF, v=0, s="")
            else:
                node = list_node()
            self.nodes[("new", k)] = node
        elif op == "set":
            _, addr, slot, val = edit
            self.node(addr)[slot] = self.value(val)
        elif op == "append":
            _, addr, val = edit
            self.node(addr).append(self.value(val))
        elif op == "del":
            _, addr, index = edit
            del self.node(addr).body.items[index]
        else:
            raise ValueError(f"bad edit {edit!r}")


def _embed_roots(store: Store, step: dict) -> list[MemNode]:
    b = _Builder(store, step)
    for edit in step["edits"]:
        b.apply(edit)
    return [b.node(a) for a in step["roots"]]


class _Path:
    """One side of a differential run."""

    def __init__(self, strategy: eng.GcStrategy):
        self.store = Store.memory()
        self.strategy = strategy
        self.in_txn = False

    def run(self, step: dict) -> None:
        op = step["op"]
        if op == "txn":
            self.begin()
            for inner in step["steps"]:
                self.run(inner)
            if step["end"] == "commit":
                self.commit()
            else:
                self.abort()
        elif op == "embed":
            self.embed(_embed_roots(self.store, step))
        elif op == "anchor":
            self.store.incr_orc(step["id"])
        elif op == "unanchor":
            self.unanchor(step["id"])
        elif op == "force_delete":
            self.force_delete(step["id"])
        else:
            raise ValueError(f"unknown step {op!r}")


class _EnginePath(_Path):
    def __init__(self, strategy):
        super().__init__(strategy)
        self.engine = eng.Engine(self.store, strategy)

    def begin(self):
        self.engine.begin_transaction()

    def commit(self):
        self.engine.end_transaction()

    def abort(self):
        self.engine.rollback()

    def embed(self, roots):
        self.engine.embed_multi(roots)

    def unanchor(self, nid):
        self.engine.unanchor(nid)

    def force_delete(self, nid):
        self.engine.force_delete(nid)


class _ReferencePath(_Path):
    """Update phase from the engine, then garbage removal by full traversal
    and counters overwritten with recomputed values."""

    def begin(self):
        self.store.begin()
        self.in_txn = True

    def commit(self):
        self.in_txn = False
        self._collect()
        self.store.commit()

    def abort(self):
        self.in_txn = False
        self.store.rollback()

    def embed(self, roots):
        eng.update(self.store, roots, self.strategy)
        self._collect()

    def unanchor(self, nid):
        self.store.decr_orc(nid)
        self._collect()

    def force_delete(self, nid):
        self.store.remove_node(nid)
        self._collect()

    def _collect(self):
        if self.in_txn:
            return
        live = full_gc_survivors(self.store)
        for nid in self.store.ids():
            if nid not in live:
                self.store.remove_node(nid)
        for nid, want in recompute_all_irc(self.store).items():
            have = self.store.read_irc(nid)
            for _ in range(want - have):
                self.store.incr_irc(nid)
            for _ in range(have - want):
                self.store.decr_irc(nid)


class ScenarioGenerator:
    """Draws steps from the current state of a store.

    Mutation mix: 30% close a cycle, 20% detach a reference, 10% build a
    diamond, the rest insert new nodes, rewire to arbitrary stored nodes or
    edit scalars.
    """

    def __init__(self, rng: random.Random, params: ScenarioParams):
        self.rng = rng
        self.params = params

    def step(self, store: Store, allow_txn: bool = True) -> dict:
        rng = self.rng
        ids = store.ids()
        roots = sorted(store.all_persistent_roots())
        x = rng.random()
        if not ids or x < 0.12:
            return self.create(store)
        if x < 0.17:
            return {"op": "anchor", "id": rng.choice(ids)}
        if x < 0.25 and roots:
            return {"op": "unanchor", "id": rng.choice(roots)}
        if x < 0.29:
            return {"op": "force_delete", "id": rng.choice(ids)}
        if x < 0.37 and allow_txn:
            return self.txn(store)
        return self.edit(store)

    def txn(self, store: Store) -> dict:
        # inner steps are drawn one at a time against the mid-transaction
        # state; see inner_step
        return {"op": "txn", "count": self.rng.randint(2, 3), "steps": [],
                "end": "rollback" if self.rng.random() < 0.25 else "commit"}

    def inner_step(self, store: Store) -> dict:
        return self.edit(store) if store.ids() else self.create(store)

    def _value_for_new_ref(self, store: Store, addrs: list, new_count: int) -> list:
        rng = self.rng
        r = rng.random()
        if r < 0.2:
            return ["null"]
        if r < 0.45 and store.ids():
            return ["db", rng.choice(store.ids())]
        return ["node", rng.choice(addrs)]

    def create(self, store: Store) -> dict:
        rng = self.rng
        budget = max(0, self.params.max_nodes - len(store))
        n = min(budget, rng.randint(1, 4)) or 1
        edits: list = []
        addrs = [["new", k] for k in range(n)]
        for k in range(n):
            edits.append(["new", k, "fixed" if rng.random() < 0.7 else "list"])
        kinds = {k: e[2] for k, e in enumerate(edits)}
        for k in range(n):
            slots = REF_FIELDS if kinds[k] == "fixed" else None
            for j in range(rng.randint(0, 3)):
                if rng.random() > self.params.edge_density * 2:
                    continue
                val = self._value_for_new_ref(store, addrs, n)
                if slots:
                    edits.append(["set", ["new", k], slots[j % 3], val])
                else:
                    edits.append(["append", ["new", k], val])
        roots = [["new", 0]]
        if n > 1 and rng.random() < 0.2:
            roots.append(["new", n - 1])
        return {"op": "embed", "load": None, "edits": edits, "roots": roots}

    def edit(self, store: Store) -> dict:
        rng = self.rng
        ids = store.ids()
        roots = sorted(store.all_persistent_roots())
        start = rng.choice(roots) if roots and rng.random() < 0.8 else rng.choice(ids)
        closure = sorted(n.id for n in eng.load(store, start).closure())
        kinds = {}
        lengths = {}
        for nid in closure:
            rec = store.read_node(nid)
            kinds[nid] = "fixed" if isinstance(rec.body, FixedBody) else "list"
            lengths[nid] = 0 if kinds[nid] == "fixed" else len(rec.body.items)
        addrs: list = [["id", i] for i in closure]
        edits: list = []
        new_count = 0
        room = self.params.max_nodes - len(store)

        def slot_of(addr):
            """A writable ref slot of the node, or None for an empty list."""
            if addr[0] == "new":
                kind = new_kinds[addr[1]]
                length = new_lengths[addr[1]]
            else:
                kind, length = kinds[addr[1]], lengths[addr[1]]
            if kind == "fixed":
                return rng.choice(REF_FIELDS)
            return rng.randrange(length) if length else None

        def point(addr, val):
            slot = slot_of(addr)
            if slot is None or rng.random() < 0.3 and _is_list(addr):
                edits.append(["append", addr, val])
                _grow(addr)
            else:
                edits.append(["set", addr, slot, val])

        new_kinds: dict[int, str] = {}
        new_lengths: dict[int, int] = {}

        def _is_list(addr):
            return (new_kinds.get(addr[1]) if addr[0] == "new" else kinds[addr[1]]) == "list"

        def _grow(addr):
            if addr[0] == "new":
                new_lengths[addr[1]] += 1
            else:
                lengths[addr[1]] += 1

        def new_node():
            nonlocal new_count, room
            k = new_count
            new_count += 1
            room -= 1
            kind = "fixed" if rng.random() < 0.7 else "list"
            new_kinds[k] = kind
            new_lengths[k] = 0
            edits.append(["new", k, kind])
            addrs.append(["new", k])
            return ["new", k]

        for _ in range(rng.randint(1, 4)):
            r = rng.random()
            x = rng.choice(addrs)
            if r < 0.3:
                # close a cycle back to the loaded root, or a self loop
                target = ["id", start] if rng.random() < 0.7 else x
                point(x, ["node", target])
            elif r < 0.5:
                # detach
                slot = slot_of(x)
                if _is_list(x) and slot is not None and rng.random() < 0.5:
                    edits.append(["del", x, slot])
                    if x[0] == "new":
                        new_lengths[x[1]] -= 1
                    else:
                        lengths[x[1]] -= 1
                elif slot is not None:
                    edits.append(["set", x, slot, ["null"]])
            elif r < 0.6:
                # diamond: two referrers to one shared node
                shared = new_node() if room > 0 and rng.random() < 0.5 else rng.choice(addrs)
                point(x, ["node", shared])
                point(rng.choice(addrs), ["node", shared])
            elif r < 0.8 and room > 0:
                # splice a new node in front of an existing target
                fresh = new_node()
                point(fresh, ["node", rng.choice(addrs)])
                point(x, ["node", fresh])
            elif r < 0.9:
                point(x, ["db", rng.choice(ids)])
            else:
                if not _is_list(x):
                    if rng.random() < 0.5:
                        edits.append(["set", x, "v", ["int", rng.randint(-1000, 1000)]])
                    else:
                        edits.append(["set", x, "s", ["str", rng.choice(["x", "yy", "zzz", ""])]])
                else:
                    edits.append(["append", x, ["int", rng.randint(0, 9)]])
                    _grow(x)
        embed_roots = [["id", start]]
        r = rng.random()
        if r < 0.15:
            embed_roots = [rng.choice(addrs)]
        elif r < 0.25 and new_count:
            embed_roots.append(["new", new_count - 1])
        return {"op": "embed", "load": start, "edits": edits, "roots": embed_roots}


def _run(scenario: Scenario, generate: bool, check_each_step: bool) -> Verdict:
    params = scenario.params
    strategy = eng.GcStrategy(params.policy)
    engine_path = _EnginePath(strategy)
    reference = _ReferencePath(strategy)
    paths = (("engine", engine_path), ("reference", reference))
    gen = ScenarioGenerator(random.Random(scenario.rng_seed), params) if generate else None
    if generate:
        scenario.steps = []
    total = params.steps if generate else len(scenario.steps)
    verdict = Verdict(True, scenario)

    def both(action) -> str | None:
        for name, path in paths:
            try:
                action(path)
            except (GedbError, KeyError, IndexError, ValueError) as exc:
                return f"{name} path raised {type(exc).__name__}: {exc}"
        return None

    for i in range(total):
        if generate:
            step = gen.step(engine_path.store)
            scenario.steps.append(step)
        else:
            step = scenario.steps[i]
        if generate and step["op"] == "txn":
            problem = both(lambda p: p.begin())
            for _ in range(step.pop("count")):
                if problem:
                    break
                inner = gen.inner_step(engine_path.store)
                step["steps"].append(inner)
                problem = both(lambda p: p.run(inner)) or diff_stores(engine_path.store,
                                                                       reference.store)
            if not problem:
                problem = both(lambda p: p.commit() if step["end"] == "commit" else p.abort())
        else:
            problem = both(lambda p: p.run(step))
        verdict.steps_run = i + 1
        if problem is None:
            problem = diff_stores(engine_path.store, reference.store)
        if problem is None and check_each_step:
            result = check_store(engine_path.store)
            if not result.ok:
                problem = f"invariant check failed: {result.to_json()}"
        if problem is not None:
            verdict.ok = False
            verdict.failed_step = i
            verdict.divergence = problem
            return verdict
    return verdict


def run_scenario(seed: int, params: ScenarioParams | None = None, *,
                 check_each_step: bool = False) -> Verdict:
    """Generate and run one scenario on the engine and the reference path."""
    return _run(Scenario(seed, params or ScenarioParams()), True, check_each_step)


def replay_scenario(scenario: Scenario, *, check_each_step: bool = False) -> Verdict:
    """Run recorded steps verbatim."""
    return _run(scenario, False, check_each_step)


def build_random_store(seed: int, params: ScenarioParams | None = None) -> Store:
    """A store shaped by the engine alone, for tests that need arbitrary content."""
    params = params or ScenarioParams()
    rng = random.Random(seed)
    path = _EnginePath(eng.GcStrategy(params.policy))
    gen = ScenarioGenerator(rng, params)
    for _ in range(params.steps):
        path.run(gen.step(path.store, allow_txn=False))
    return path.store


def scenario_from_any(obj: Any) -> Scenario:
    if isinstance(obj, Scenario):
        return obj
    return Scenario.from_json(obj)
