"""Independent checks run against a finished (or running) engine.

None of these consult the lock manager's own bookkeeping to decide whether
it behaved; they recompute expected outcomes from the trace and the
scenario's initial data.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..ids import Tid, chain_accessible, is_ancestor

MAX_ROOTS = 6


class DurableWatch:
    """Flags any durable-store change not caused by an already committed transaction."""

    def __init__(self, engine):
        self.engine = engine
        self.prev = engine.store.state_hash()
        self.seen = 0
        self.committed: set = set()
        self.violations: list[str] = []

    def observe(self) -> None:
        records = self.engine.tracer.records
        fresh = records[self.seen:]
        self.seen = len(records)
        writes = []
        for r in fresh:
            if r.kind == "commit-point":
                self.committed.add(r.get("tid"))
            elif r.kind == "durable-write":
                writes.append(r)
        h = self.engine.store.state_hash()
        if h == self.prev:
            return
        self.prev = h
        if not writes:
            self.violations.append(f"step {self.engine.net.now}: durable state changed with no commit")
        for r in writes:
            if r.get("tid") not in self.committed:
                self.violations.append(
                    f"step {r.step}: durable write for {r.get('tid')} before its commit point")


def final_statuses(records) -> dict[Tid, str]:
    out = {}
    for r in records:
        if r.kind == "status":
            out[r.get("tid")] = str(r.get("status"))
    return out


def committed_path(tid: Tid, statuses: dict) -> bool:
    return all(statuses.get(a) == "COMMITTED" for a in tid.ancestors())


@dataclass
class SerialCheck:
    ok: bool
    order: Optional[tuple] = None
    reason: str = ""
    unchecked: tuple = ()
    roots: tuple = ()

    def __bool__(self):
        return self.ok


def committed_ops(records) -> dict[Tid, list]:
    """Data operations of fully committed transactions, grouped by top-level root."""
    statuses = final_statuses(records)
    by_root: dict[Tid, list] = {}
    for r in records:
        if r.kind != "op":
            continue
        t = r.get("tid")
        if committed_path(t, statuses):
            by_root.setdefault(t.root, []).append(
                (r.get("file"), r.site, r.get("page"), r.get("op"), r.get("value")))
    return by_root


def check_serializable(records, initial: dict, durable) -> SerialCheck:
    """Search for a serial order of committed roots that explains reads and final state.

    initial maps file name -> initial page tuple; durable(file, site) returns
    the final durable pages of one copy.
    """
    by_root = committed_ops(records)
    copies: dict[str, set] = {}
    for ops in by_root.values():
        for f, site, *_ in ops:
            copies.setdefault(f, set()).add(site)
    unchecked = tuple(sorted(f for f, s in copies.items() if len(s) > 1))
    checked = {f: next(iter(s)) for f, s in copies.items() if len(s) == 1}
    roots = tuple(sorted(by_root))
    if len(roots) > MAX_ROOTS:
        raise ValueError(f"{len(roots)} committed roots; brute force is limited to {MAX_ROOTS}")
    expected = {f: tuple(durable(f, s)) for f, s in checked.items()}
    for order in itertools.permutations(roots):
        if _replay(order, by_root, initial, checked, expected):
            return SerialCheck(True, order, unchecked=unchecked, roots=roots)
    return SerialCheck(False, reason="no serial order reproduces the reads and final state",
                       unchecked=unchecked, roots=roots)


def _replay(order, by_root, initial, checked, expected) -> bool:
    state = {f: list(initial[f]) for f in checked}
    for root in order:
        for f, _, idx, op, value in by_root[root]:
            if f not in state:
                continue
            pages = state[f]
            if op == "read":
                if idx >= len(pages) or pages[idx] != value:
                    return False
            elif idx == len(pages):
                pages.append(value)
            else:
                pages[idx] = value
    return all(tuple(state[f]) == expected[f] for f in checked)


def check_scenario_serializable(result) -> SerialCheck:
    sc = result.scenario
    initial = {f.name: f.pages for f in sc.files}
    store = result.engine.store
    return check_serializable(result.records, initial, lambda f, s: store.load(f, s).pages())


def orphan_problems(engine) -> list[str]:
    """Records, t-lock entries or waiters that a completed topology change should have cleared."""
    out = []
    for site in engine.net.sites:
        acc = engine.acc(site)
        st = engine.sites[site]
        for tid in st.records:
            if any(s.home not in acc for s in tid.superiors()):
                out.append(f"s{site}: orphan record {tid}")
        for name, tl in st.locks.locks.items():
            tids = list(tl.read_holders) + list(tl.read_retainers) + tl.write_retainer_tids()
            if tl.write_holder is not None:
                tids.append(tl.write_holder.tid)
            for t in tids:
                if not chain_accessible(t, acc):
                    out.append(f"s{site}: t-lock {name} references orphan {t}")
        for pid, proc in st.procs.items():
            if not proc.alive or not proc.waiting:
                continue
            w = proc.waiting
            if w[0] == "site" and w[1] not in acc:
                out.append(f"s{site}: {pid} waits on inaccessible site {w[1]}")
            if w[0] == "relcall" and w[1].home not in acc and (
                    proc.tid is None or chain_accessible(proc.tid, acc)):
                out.append(f"s{site}: {pid} waits on severed {w[1]}")
    return out


def leftovers(engine) -> list[str]:
    """Anything still held once a fully merged network is quiescent."""
    out = []
    for site in engine.net.sites:
        st = engine.sites[site]
        out += [f"s{site}: record {t}" for t in st.records]
        out += [f"s{site}: t-lock {n}" for n in st.locks.locks]
        out += [f"s{site}: prepared {t}" for t in st.prepared]
        out += [f"s{site}: live {p}" for p, proc in st.procs.items() if proc.alive]
    return out


def reference_file_state(initial: Iterable[str], writes, aborted) -> tuple:
    """Replay writes in order, skipping any made by a transaction with an aborted ancestor-or-self."""
    pages = list(initial)
    for t, idx, content in writes:
        if any(is_ancestor(a, t) for a in aborted):
            continue
        if idx == len(pages):
            pages.append(content)
        else:
            pages[idx] = content
    return tuple(pages)
