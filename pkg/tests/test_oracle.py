import sys
from collections import deque
from pathlib import Path

import pytest

from gedb import engine as eng
from gedb import oracle
from gedb.engine import Engine
from gedb.model import ListBody, Ref, list_node
from gedb.store import Store

sys.path.insert(0, str(Path(__file__).parent))
from helpers import build_two_root_cycle, export_bytes, ids_by_name, person  # noqa: E402


def test_full_gc_survivors_empty_store():
    assert oracle.full_gc_survivors(Store.memory()) == set()


@pytest.mark.parametrize("x2_to_c, expected", [
    (False, {"A", "F", "E", "X1", "X2"}),
    (True, {"A", "F", "E", "B", "C", "D", "X1", "X2"}),
])
def test_full_gc_survivors_before_collection(x2_to_c, expected):
    store = Store.memory()
    ids = build_two_root_cycle(store, x2_to_c=x2_to_c)
    a = Engine(store).load(ids["A"]).roots[0]
    e = a.target("r1").target("r1").target("r2")
    a["r1"] = person("F", r1=e)
    Engine(store).update([a])
    names = {v: k for k, v in ids_by_name(store).items()}
    assert {names[i] for i in oracle.full_gc_survivors(store)} == expected


def test_recompute_irc_examples():
    store = Store.memory()
    n = list_node()
    n.append(n)
    Engine(store).embed(n)
    assert oracle.recompute_all_irc(store) == {n.id: 1}

    store = Store.memory()
    ids = build_two_root_cycle(store, x2_to_c=False)
    irc = oracle.recompute_all_irc(store)
    assert (irc[ids["B"]], irc[ids["C"]], irc[ids["D"]]) == (2, 1, 1)

    store = Store.memory()
    Engine(store).embed(list_node(1, "x", None))
    assert set(oracle.recompute_all_irc(store).values()) == {0}


def test_oracle_reads_never_write():
    store = oracle.build_random_store(3)
    store.stats_reset()
    oracle.full_gc_survivors(store)
    oracle.recompute_all_irc(store)
    oracle.check_store(store)
    assert store.stats_read().nodes_written == 0


def test_check_store_reports_violations():
    store = Store.memory()
    ids = build_two_root_cycle(store, x2_to_c=False)
    assert oracle.check_store(store).ok
    store.incr_irc(ids["E"])
    orphan = store.allocate_node("list")
    result = oracle.check_store(store)
    assert not result.ok
    assert result.irc_mismatch == {ids["E"]: (2, 1)}
    assert result.unreachable == [orphan]
    assert result.to_json()["irc_mismatch"] == [{"id": ids["E"], "stored": 2, "expected": 1}]


def test_diff_stores():
    a, b = Store.memory(), Store.memory()
    for s in (a, b):
        s.allocate_node("list")
    assert oracle.diff_stores(a, b) is None
    b.write_body(1, ListBody([Ref(0)]))
    assert "1" in oracle.diff_stores(a, b)


def test_tiny_scenario_passes():
    verdict = oracle.run_scenario(0, oracle.ScenarioParams(max_nodes=3, steps=2))
    assert verdict.ok and verdict.steps_run == 2


def test_scenarios_are_deterministic():
    params = oracle.ScenarioParams(max_nodes=20, steps=10)
    first, second = oracle.run_scenario(11, params), oracle.run_scenario(11, params)
    assert first.to_json() == second.to_json()
    assert first.scenario.to_json() == second.scenario.to_json()
    assert export_bytes(oracle.build_random_store(11, params)) == export_bytes(oracle.build_random_store(11, params))


def test_scenario_json_round_trip_and_replay():
    verdict = oracle.run_scenario(5, oracle.ScenarioParams(max_nodes=30, steps=15))
    text = verdict.scenario.to_json()
    scenario = oracle.Scenario.from_json(text)
    assert scenario.to_json() == text
    assert oracle.replay_scenario(scenario).to_json() == verdict.to_json()
    assert oracle.scenario_from_any(text).rng_seed == 5


def test_scenarios_exercise_transactions_and_tools():
    ops = set()
    for seed in range(40):
        for step in oracle.run_scenario(seed).scenario.steps:
            ops.add(step["op"])
            ops.update(s["op"] for s in step.get("steps", []))
    assert {"embed", "txn", "anchor", "unanchor", "force_delete"} <= ops


def test_each_step_checks_pass():
    for seed in range(30):
        assert oracle.run_scenario(seed, check_each_step=True).ok


def walk_without_correction(store, gc, seeds, strategy=eng.DEFAULT_STRATEGY, rng=None):
    counts = gc.internal_ref_counts
    for seed in sorted(seeds):
        queue = deque([seed])
        while queue:
            nid = queue.popleft()
            if nid in counts:
                counts[nid] += 1
                continue
            counts[nid] = 1
            queue.extend(store.child_ids(nid))


def test_suite_catches_missing_walk_correction(monkeypatch, tmp_path):
    monkeypatch.setattr(eng, "walk_z", walk_without_correction)
    failing = [v for v in (oracle.run_scenario(seed) for seed in range(50)) if not v.ok]
    assert failing
    path = tmp_path / "fail.json"
    path.write_text(failing[0].scenario.to_json())
    replayed = oracle.replay_scenario(oracle.Scenario.from_json(path.read_text()))
    assert not replayed.ok and replayed.failed_step == failing[0].failed_step
