"""Command-line front end.

Exit codes: 0 success, 1 unparsable input, 2 engine or store contract error
(including a failed ``check``), 3 I/O error. Structured output is JSON on
stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import sys
from contextlib import contextmanager
from pathlib import Path

from gedb import oracle
from gedb.engine import EmbedReport, Engine, GcStrategy, POLICIES
from gedb.errors import CorruptJournal, DumpError, GedbError
from gedb.model import MemGraph, Snapshot, parse_dump, serialize_dump
from gedb.store import Store

EXIT_OK, EXIT_PARSE, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


@contextmanager
def _locked(db: Path):
    lock_path = db.with_name(db.name + ".lock")
    with open(lock_path, "a") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise CliError(f"{db} is in use by another process", EXIT_IO) from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


@contextmanager
def _open_db(path: str, *, must_exist: bool = True):
    db = Path(path)
    if must_exist and not db.exists():
        raise CliError(f"database {db} does not exist", EXIT_IO)
    with _locked(db):
        store = Store.open(db)
        try:
            yield store
        finally:
            store.close()


def _read_dump(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_IO) from None
    try:
        return parse_dump(text)
    except DumpError as exc:
        raise CliError(f"{path}: {exc}", EXIT_PARSE) from None


def _read_graph(path: str) -> MemGraph:
    g = _read_dump(path)
    if isinstance(g, Snapshot):
        raise CliError(f"{path} is a database snapshot, not a graph to embed", EXIT_PARSE)
    return g


def _strategy(args) -> GcStrategy:
    return GcStrategy(args.strategy, frozenset(args.hint or ()), args.acyclic)


def _pick_roots(g: MemGraph, keys: list[str] | None, multi: bool, source: str):
    if keys:
        missing = [k for k in keys if k not in g.nodes]
        if missing:
            raise CliError(f"{source}: unknown root key(s) {missing}", EXIT_PARSE)
        roots = [g.nodes[k] for k in keys]
    else:
        roots = list(g.roots)
    if not roots:
        raise CliError(f"{source}: no root given", EXIT_PARSE)
    if len(roots) > 1 and not multi:
        raise CliError(f"{source}: {len(roots)} roots given; use --multi", EXIT_PARSE)
    return roots


# -- commands ----------------------------------------------------------------


def cmd_create(args) -> int:
    db = Path(args.db)
    if db.exists() and db.stat().st_size > 0:
        raise CliError(f"{db} already exists", EXIT_CONTRACT)
    with _open_db(args.db, must_exist=False):
        pass
    return EXIT_OK


def cmd_import(args) -> int:
    snap = _read_dump(args.dump)
    if not isinstance(snap, Snapshot):
        if snap.nodes:
            raise CliError(f"{args.dump} is not a database snapshot", EXIT_PARSE)
        snap = Snapshot()
    with _open_db(args.db, must_exist=False) as store:
        if len(store) or store.next_id != 1:
            raise CliError(f"{args.db} is not empty", EXIT_CONTRACT)
        store.restore(snap)
    return EXIT_OK


def cmd_export(args) -> int:
    with _open_db(args.db) as store:
        text = serialize_dump(store.snapshot())
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_load(args) -> int:
    with _open_db(args.db) as store:
        sys.stdout.write(serialize_dump(Engine(store).load(args.id)))
    return EXIT_OK


def cmd_embed(args) -> int:
    if bool(args.dump) == bool(args.txn_script):
        raise CliError("give either a dump file or --txn-script", EXIT_PARSE)
    with _open_db(args.db) as store:
        engine = Engine(store, _strategy(args), lenient=args.lenient)
        if args.dump:
            g = _read_graph(args.dump)
            report = engine.embed_multi(_pick_roots(g, args.root, args.multi, args.dump))
        else:
            report = _run_txn_script(engine, Path(args.txn_script), args.multi)
    _emit(report.to_json())
    return EXIT_OK


def _run_txn_script(engine: Engine, script: Path, multi: bool) -> EmbedReport:
    """Embed every dump listed in ``script`` (one path per line) in one transaction."""
    try:
        lines = script.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read {script}: {exc.strerror}", EXIT_IO) from None
    paths = [script.parent / ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]
    graphs = [(str(p), _read_graph(str(p))) for p in paths]
    engine.begin_transaction()
    allocated = []
    try:
        for source, g in graphs:
            allocated += engine.embed_multi(_pick_roots(g, None, multi, source)).allocated
    except BaseException:
        engine.rollback()
        raise
    report = engine.end_transaction()
    report.allocated = allocated
    return report


def cmd_anchor(args) -> int:
    with _open_db(args.db) as store:
        Engine(store).anchor(args.id)
    _emit({"allocated": [], "removed": []})
    return EXIT_OK


def cmd_unanchor(args) -> int:
    with _open_db(args.db) as store:
        report = Engine(store, _strategy(args)).unanchor(args.id)
    _emit(report.to_json())
    return EXIT_OK


def cmd_force_delete(args) -> int:
    with _open_db(args.db) as store:
        report = Engine(store, _strategy(args)).force_delete(args.id)
    _emit(report.to_json())
    return EXIT_OK


def cmd_check(args) -> int:
    with _open_db(args.db) as store:
        result = oracle.check_store(store)
    _emit(result.to_json())
    if not result.ok:
        for nid, (stored, expected) in sorted(result.irc_mismatch.items()):
            print(f"node {nid}: irc is {stored}, expected {expected}", file=sys.stderr)
        for nid in result.unreachable:
            print(f"node {nid}: not reachable from any persistent root", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


def cmd_stats(args) -> int:
    with _open_db(args.db) as store:
        _emit({
            "nodes": len(store),
            "next_id": store.next_id,
            "roots": sorted(store.all_persistent_roots()),
            "types": {name: [list(f) for f in schema] for name, schema in store.schemas.items()},
        })
    return EXIT_OK


def cmd_compact(args) -> int:
    with _open_db(args.db) as store:
        store.compact()
    return EXIT_OK


def cmd_replay(args) -> int:
    if args.scenario:
        try:
            scenario = oracle.Scenario.from_json(Path(args.scenario).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read {args.scenario}: {exc.strerror}", EXIT_IO) from None
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"{args.scenario}: malformed scenario ({exc})", EXIT_PARSE) from None
        verdict = oracle.replay_scenario(scenario, check_each_step=args.check_each_step)
    else:
        params = oracle.ScenarioParams(max_nodes=args.max_nodes, steps=args.steps)
        verdict = oracle.run_scenario(args.seed, params, check_each_step=args.check_each_step)
    _emit(verdict.to_json())
    if not verdict.ok and args.save:
        Path(args.save).write_text(verdict.scenario.to_json(), encoding="utf-8")
    return EXIT_OK if verdict.ok else EXIT_CONTRACT


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gedb", description=__doc__.splitlines()[0])
    p.add_argument("--replay", metavar="SCENARIO", help="shorthand for `gedb replay SCENARIO`")
    sub = p.add_subparsers(dest="command")

    def with_db(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("db", help="database journal file")
        sp.set_defaults(func=func)
        return sp

    def with_strategy(sp):
        sp.add_argument("--strategy", choices=POLICIES, default="always-false",
                        help="how the collector recognises certainly-live nodes")
        sp.add_argument("--hint", type=int, action="append", metavar="ID",
                        help="id known to stay live (with --strategy hint-set)")
        sp.add_argument("--acyclic", action="store_true",
                        help="use the cascade collector; leaks cyclic garbage")

    with_db("create", cmd_create, "create an empty database")
    sp = with_db("import", cmd_import, "build a database from a snapshot dump")
    sp.add_argument("dump")
    sp = with_db("export", cmd_export, "write a snapshot dump of the database")
    sp.add_argument("-o", "--output")
    sp = with_db("load", cmd_load, "print the graph reachable from a node as a dump")
    sp.add_argument("id", type=int)
    sp = with_db("embed", cmd_embed, "embed a modified graph")
    sp.add_argument("dump", nargs="?")
    sp.add_argument("--root", action="append", metavar="KEY", help="root key (default: dump roots)")
    sp.add_argument("--multi", action="store_true", help="embed several roots at once")
    sp.add_argument("--txn-script", metavar="FILE",
                    help="file listing dumps to embed inside one transaction")
    sp.add_argument("--lenient", action="store_true",
                    help="save gray nodes whose record is gone as new nodes")
    with_strategy(sp)
    sp = with_db("anchor", cmd_anchor, "increment a node's outer reference count")
    sp.add_argument("id", type=int)
    sp = with_db("unanchor", cmd_unanchor, "decrement a node's outer reference count and collect")
    sp.add_argument("id", type=int)
    with_strategy(sp)
    sp = with_db("force-delete", cmd_force_delete, "remove a node regardless of referrers")
    sp.add_argument("id", type=int)
    with_strategy(sp)
    with_db("check", cmd_check, "verify reference counts and reachability")
    with_db("stats", cmd_stats, "print summary counters")
    with_db("compact", cmd_compact, "rewrite the journal as one snapshot")

    sp = sub.add_parser("replay", help="run a differential scenario")
    sp.add_argument("scenario", nargs="?", help="scenario JSON file")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--max-nodes", type=int, default=50)
    sp.add_argument("--check-each-step", action="store_true")
    sp.add_argument("--save", metavar="FILE", help="write the scenario here if it fails")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.replay:
        args = parser.parse_args(["replay", args.replay])
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_PARSE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"gedb: {exc}", file=sys.stderr)
        return exc.code
    except CorruptJournal as exc:
        print(f"gedb: {exc}", file=sys.stderr)
        return EXIT_IO
    except DumpError as exc:
        print(f"gedb: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except GedbError as exc:
        print(f"gedb: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"gedb: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
