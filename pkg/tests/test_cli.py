import fcntl
import json
import subprocess
import sys
from pathlib import Path

import pytest

from gedb import cli
from gedb import engine as eng
from gedb.model import serialize_dump
from gedb.store import Store

sys.path.insert(0, str(Path(__file__).parent))
from helpers import build_two_root_cycle  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def cycle_db(tmp_path, capsys):
    """A database holding the two-root fixture without the X2 -> C edge."""
    store = Store.memory()
    build_two_root_cycle(store, x2_to_c=False)
    snap = tmp_path / "cycle.json"
    snap.write_text(serialize_dump(store.snapshot()))
    db = tmp_path / "cycle.gedb"
    assert run(capsys, "import", db, snap)[0] == 0
    return db


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc))
    return path


def test_create_and_check_fresh_db(tmp_path, capsys):
    db = tmp_path / "db"
    assert run(capsys, "create", db)[0] == 0
    code, out, _ = run(capsys, "check", db)
    assert code == 0 and json.loads(out) == {"irc_mismatch": [], "ok": True, "unreachable": []}
    code, _, err = run(capsys, "create", db)
    assert code == 2 and "already exists" in err


def test_export_empty_db_is_minimal(tmp_path, capsys):
    db = tmp_path / "db"
    run(capsys, "create", db)
    code, out, _ = run(capsys, "export", db)
    assert code == 0 and out == '{\n  "nodes": {},\n  "roots": []\n}\n'


def test_export_import_export_is_stable(cycle_db, tmp_path, capsys):
    first = tmp_path / "first.json"
    assert run(capsys, "export", cycle_db, "-o", first)[0] == 0
    db2 = tmp_path / "copy.gedb"
    assert run(capsys, "import", db2, first)[0] == 0
    _, second, _ = run(capsys, "export", db2)
    assert second == first.read_text()


def test_import_golden_then_check(tmp_path, capsys):
    db = tmp_path / "db"
    assert run(capsys, "import", db, GOLDEN / "shared_cycle_snapshot.json")[0] == 0
    assert run(capsys, "check", db)[0] == 0
    code, _, err = run(capsys, "import", db, GOLDEN / "shared_cycle_snapshot.json")
    assert code == 2 and "not empty" in err


def test_rewire_embed_from_dump(cycle_db, tmp_path, capsys):
    code, out, _ = run(capsys, "load", cycle_db, 1)
    assert code == 0
    doc = json.loads(out)
    assert sorted(doc["nodes"]) == ["n1", "n3", "n5", "n6", "n7"]
    doc["nodes"]["n1"]["fields"]["r1"] = {"ref": "f"}
    doc["nodes"]["f"] = {"id": 0, "kind": "fixed", "type_name": "P", "fields": {
        "name": {"str": "F"}, "age": {"int": 0}, "r1": {"ref": "n7"}, "r2": {"nullref": None}}}
    doc["nodes"]["n7"]["fields"]["age"] = {"int": 25}
    code, out, _ = run(capsys, "embed", cycle_db, write_json(tmp_path / "g1.json", doc))
    assert code == 0
    assert json.loads(out) == {"allocated": [8], "removed": [3, 5, 6]}
    assert run(capsys, "check", cycle_db)[0] == 0


def test_noop_embed(cycle_db, tmp_path, capsys):
    _, out, _ = run(capsys, "load", cycle_db, 1)
    (tmp_path / "same.json").write_text(out)
    before = run(capsys, "export", cycle_db)[1]
    code, out, _ = run(capsys, "embed", cycle_db, tmp_path / "same.json")
    assert code == 0 and json.loads(out) == {"allocated": [], "removed": []}
    assert run(capsys, "export", cycle_db)[1] == before


def test_unknown_dbref_exits_2(cycle_db, tmp_path, capsys):
    dump = write_json(tmp_path / "bad.json", {"roots": ["a"], "nodes": {
        "a": {"id": 0, "kind": "list", "items": [{"dbref": 4242}]}}})
    code, out, err = run(capsys, "embed", cycle_db, dump)
    assert code == 2 and out == "" and "4242" in err
    assert err.count("\n") == 1


def test_parse_errors_exit_1(cycle_db, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "embed", cycle_db, bad)
    assert code == 1 and "offset" in err
    two = write_json(tmp_path / "two.json", {"roots": ["a", "b"], "nodes": {
        "a": {"id": 0, "kind": "list", "items": []}, "b": {"id": 0, "kind": "list", "items": []}}})
    code, _, err = run(capsys, "embed", cycle_db, two)
    assert code == 1 and "--multi" in err
    code, _, err = run(capsys, "embed", cycle_db, two, "--root", "zz")
    assert code == 1 and "zz" in err
    assert run(capsys)[0] == 1


def test_multi_and_root_selection(cycle_db, tmp_path, capsys):
    two = write_json(tmp_path / "two.json", {"roots": ["a", "b"], "nodes": {
        "a": {"id": 0, "kind": "list", "items": [{"ref": "b"}]}, "b": {"id": 0, "kind": "list", "items": []}}})
    code, out, _ = run(capsys, "embed", cycle_db, two, "--multi")
    assert code == 0 and json.loads(out)["allocated"] == [8, 9]
    code, out, _ = run(capsys, "embed", cycle_db, two, "--root", "b")
    assert code == 0 and json.loads(out)["allocated"] == [10]
    _, out, _ = run(capsys, "stats", cycle_db)
    assert json.loads(out)["roots"] == [1, 2, 8, 9, 10]


def test_io_errors_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "check", tmp_path / "missing.gedb")
    assert code == 3 and "does not exist" in err
    db = tmp_path / "db"
    run(capsys, "create", db)
    code, _, _ = run(capsys, "embed", db, tmp_path / "missing.json")
    assert code == 3
    corrupt = tmp_path / "corrupt"
    corrupt.write_bytes(b"garbage!")
    assert run(capsys, "check", corrupt)[0] == 3


def test_hand_corrupted_counter_fails_check(cycle_db, capsys):
    with Store.open(cycle_db) as store:
        store.incr_irc(7)
    code, out, err = run(capsys, "check", cycle_db)
    assert code == 2 and not json.loads(out)["ok"]
    assert "node 7" in err


def test_tool_commands(cycle_db, capsys):
    assert run(capsys, "anchor", cycle_db, 3)[0] == 0
    code, out, _ = run(capsys, "unanchor", cycle_db, 3)
    assert code == 0 and json.loads(out)["removed"] == []
    code, out, _ = run(capsys, "force-delete", cycle_db, 2)
    assert json.loads(out) == {"allocated": [], "removed": [2, 4]}
    code, out, _ = run(capsys, "unanchor", cycle_db, 1, "--strategy", "orc-positive")
    assert json.loads(out)["removed"] == [1, 3, 5, 6, 7]
    code, _, err = run(capsys, "unanchor", cycle_db, 1)
    assert code == 2 and "node 1" in err
    assert run(capsys, "check", cycle_db)[0] == 0


def test_txn_script_keeps_reattached_node(cycle_db, tmp_path, capsys):
    _, out, _ = run(capsys, "load", cycle_db, 1)
    doc = json.loads(out)
    detached = json.loads(out)
    detached["nodes"]["n1"]["fields"]["r1"] = {"nullref": None}
    write_json(tmp_path / "detach.json", detached)
    write_json(tmp_path / "reattach.json", doc)
    script = tmp_path / "txn.txt"
    script.write_text("# detach, then put it back\ndetach.json\nreattach.json\n")
    code, out, _ = run(capsys, "embed", cycle_db, "--txn-script", script)
    assert code == 0 and json.loads(out) == {"allocated": [], "removed": []}
    code, out, _ = run(capsys, "embed", cycle_db, tmp_path / "detach.json")
    assert json.loads(out)["removed"] == [3, 5, 6, 7]


def test_failed_txn_script_changes_nothing(cycle_db, tmp_path, capsys):
    before = run(capsys, "export", cycle_db)[1]
    write_json(tmp_path / "ok.json", {"roots": ["a"], "nodes": {"a": {"id": 0, "kind": "list", "items": []}}})
    write_json(tmp_path / "bad.json", {"roots": ["a"], "nodes": {"a": {"id": 99, "kind": "list", "items": []}}})
    (tmp_path / "txn.txt").write_text("ok.json\nbad.json\n")
    code, _, err = run(capsys, "embed", cycle_db, "--txn-script", tmp_path / "txn.txt")
    assert code == 2 and "99" in err
    assert run(capsys, "export", cycle_db)[1] == before


def test_hint_strategy_flags(cycle_db, tmp_path, capsys):
    _, out, _ = run(capsys, "load", cycle_db, 1)
    doc = json.loads(out)
    doc["nodes"]["n1"]["fields"]["r1"] = {"nullref": None}
    dump = write_json(tmp_path / "detach.json", doc)
    code, out, _ = run(capsys, "embed", cycle_db, dump, "--strategy", "hint-set", "--hint", "2")
    assert code == 0 and json.loads(out)["removed"] == [3, 5, 6, 7]


def test_acyclic_flag_leaks_cycles(cycle_db, tmp_path, capsys):
    _, out, _ = run(capsys, "load", cycle_db, 1)
    doc = json.loads(out)
    doc["nodes"]["n1"]["fields"]["r1"] = {"nullref": None}
    code, out, _ = run(capsys, "embed", cycle_db, write_json(tmp_path / "d.json", doc), "--acyclic")
    assert code == 0 and json.loads(out)["removed"] == []
    assert run(capsys, "check", cycle_db)[0] == 2


def test_lenient_flag(cycle_db, tmp_path, capsys):
    dump = write_json(tmp_path / "stale.json", {"roots": ["a"], "nodes": {
        "a": {"id": 50, "kind": "list", "items": []}}})
    assert run(capsys, "embed", cycle_db, dump)[0] == 2
    code, out, _ = run(capsys, "embed", cycle_db, dump, "--lenient")
    assert code == 0 and json.loads(out)["allocated"] == [8]


def test_replay_commands(tmp_path, capsys, monkeypatch):
    code, out, _ = run(capsys, "replay", "--seed", 3, "--steps", 5)
    assert code == 0 and json.loads(out)["ok"]

    from gedb import oracle
    scenario = tmp_path / "s.json"
    scenario.write_text(oracle.run_scenario(4).scenario.to_json())
    code, out, _ = run(capsys, "--replay", scenario)
    assert code == 0 and json.loads(out)["seed"] == 4

    from test_oracle import walk_without_correction
    monkeypatch.setattr(eng, "walk_z", walk_without_correction)
    saved = tmp_path / "failure.json"
    for seed in range(50):
        code, out, _ = run(capsys, "replay", "--seed", seed, "--save", saved)
        if code:
            break
    assert code == 2 and not json.loads(out)["ok"]
    assert oracle.Scenario.from_json(saved.read_text()).rng_seed == seed
    assert run(capsys, "replay", saved)[0] == 2

    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert run(capsys, "replay", bad)[0] == 1


def test_locked_database_is_rejected(cycle_db, capsys):
    with open(cycle_db.with_name(cycle_db.name + ".lock"), "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        code, _, err = run(capsys, "check", cycle_db)
    assert code == 3 and "in use" in err
    assert run(capsys, "check", cycle_db)[0] == 0


def test_compact_keeps_export(cycle_db, capsys):
    before = run(capsys, "export", cycle_db)[1]
    assert run(capsys, "compact", cycle_db)[0] == 0
    assert run(capsys, "export", cycle_db)[1] == before


def test_output_is_deterministic(cycle_db, capsys):
    assert run(capsys, "stats", cycle_db) == run(capsys, "stats", cycle_db)
    assert run(capsys, "load", cycle_db, 2) == run(capsys, "load", cycle_db, 2)


def test_console_script_entry(cycle_db):
    proc = subprocess.run([sys.executable, "-m", "gedb.cli", "check", str(cycle_db)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["ok"]
