"""Deterministic scenario runner."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..filestore import DurableStore, FileSpec
from ..ids import Tid
from ..net import Envelope
from ..txn import Config, Engine
from .oracles import DurableWatch
from .scenario import Expect, Scenario

DEFAULT_STEP_LIMIT = 200_000


class Livelock(Exception):
    def __init__(self, limit: int, pending: list[Envelope]):
        lines = [f"step limit {limit} exceeded; {len(pending)} pending event(s):"]
        for env in pending[:20]:
            lines.append(f"  due={env.due} s{env.src}->s{env.dst} {env.msg.kind} {env.msg.fields}")
        super().__init__("\n".join(lines))
        self.pending = pending


@dataclass
class Result:
    scenario: Scenario
    engine: Engine
    failures: list = field(default_factory=list)
    early_writes: list = field(default_factory=list)
    steps: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def trace(self) -> str:
        return self.engine.tracer.text()

    @property
    def records(self):
        return self.engine.tracer.records

    @property
    def metrics(self):
        return self.engine.net.metrics

    def counters(self) -> dict[str, int]:
        return counters(self.engine)

    def status_of(self, tid) -> str:
        return status_of(self.records, tid)

    def reg(self, label: str, reg: str) -> Optional[str]:
        return self.engine.roots[label].regs.get(reg)


def counters(engine: Engine) -> dict[str, int]:
    m = engine.net.metrics
    out = dict(m.summary())
    out["durable_writes"] = sum(engine.store.writes.values())
    for kind, n in m.remote.items():
        out[f"remote.{kind}"] = n
    for kind, n in m.local.items():
        out[f"local.{kind}"] = n
    for phase, n in m.remote_by_phase.items():
        out[f"phase.{phase}"] = n
    for site, n in engine.store.writes.items():
        out[f"durable_writes.s{site}"] = n
    return out


def status_of(records, tid) -> str:
    tid = str(tid)
    status = "UNDEFINED"
    for r in records:
        if r.kind == "status" and str(r.get("tid")) == tid:
            status = str(r.get("status"))
    return status


def build_engine(sc: Scenario, page_size=None, retry_limit=None) -> Engine:
    store = DurableStore(page_size=page_size or sc.page_size)
    for f in sc.files:
        store.add_file(FileSpec(f.name, f.replicas, f.pages))
    config = Config(
        retry_limit=sc.retry_limit if retry_limit is None else retry_limit,
        retry_delay=sc.retry_delay,
        commit_mode=sc.commit_mode,
    )
    engine = Engine(sc.sites, store, sc.programs, config)
    for root in sc.roots:
        engine.spawn_root(root.label, root.site, root.script)
    return engine


class Runner:
    """Steps one scenario; tests may drive it event by event."""

    def __init__(self, sc: Scenario, step_limit: int = DEFAULT_STEP_LIMIT,
                 page_size=None, retry_limit=None, watch: bool = True):
        self.scenario = sc
        self.engine = build_engine(sc, page_size, retry_limit)
        self.step_limit = step_limit
        self.faults = list(sc.faults)
        self.failures: list[str] = []
        self.delivered: Counter = Counter()
        self.watch = DurableWatch(self.engine) if watch else None
        self.steps = 0

    @property
    def net(self):
        return self.engine.net

    def peek(self) -> Optional[Envelope]:
        pending = self.net.pending()
        return pending[0] if pending else None

    def repartition(self, groups) -> None:
        self.net.repartition(groups)
        if self.watch:
            self.watch.observe()

    def merge(self) -> None:
        self.repartition([self.net.sites])

    def _apply(self, fault) -> None:
        kind = fault.action[0]
        if kind == "partition":
            self.repartition(fault.action[1])
        elif kind == "merge":
            self.merge()
        else:
            self.failures += check(self.engine, [fault.action[1]], prefix=f"at line {fault.line}: ")

    def _fault_due(self, fault, nxt: Optional[Envelope], now_next: Optional[int]) -> bool:
        when = fault.when
        if when[0] == "step":
            return now_next is None or when[1] <= now_next
        if when[0] == "quiet":
            return nxt is None
        if when[0] == "before":
            if nxt is None:
                return True
            return (nxt.msg.kind == when[1] and not nxt.timer
                    and self.delivered[when[1]] + 1 == when[2])
        if when[0] == "after":
            return nxt is None or self.delivered[when[1]] >= when[2]
        raise ValueError(when)

    def step(self) -> Optional[Envelope]:
        """Apply due faults, then deliver one event; None once everything is done."""
        while self.faults:
            nxt = self.peek()
            if not self._fault_due(self.faults[0], nxt, self.net.next_time()):
                break
            fault = self.faults.pop(0)
            if fault.when[0] == "step" and nxt is None:
                self.net.now = max(self.net.now, fault.when[1])
            self._apply(fault)
        env = self.net.step()
        if env is None:
            return None
        self.steps += 1
        if env.src != env.dst or not env.timer:
            self.delivered[env.msg.kind] += 1
        if self.watch:
            self.watch.observe()
        if self.steps > self.step_limit:
            raise Livelock(self.step_limit, self.net.pending())
        return env

    def run_until(self, pred: Callable[[Optional[Envelope]], bool]) -> Optional[Envelope]:
        """Step until pred(next pending envelope) holds; returns that envelope."""
        while True:
            nxt = self.peek()
            if pred(nxt) or (nxt is None and not self.faults):
                return nxt
            if self.step() is None and not self.faults:
                return None

    def run(self) -> Result:
        while self.step() is not None or self.faults:
            pass
        return self.finish()

    def finish(self) -> Result:
        failures = list(self.failures)
        failures += check(self.engine, self.scenario.expects)
        early = list(self.watch.violations) if self.watch else []
        return Result(self.scenario, self.engine, failures, early, self.steps)


def run(sc: Scenario, step_limit: int = DEFAULT_STEP_LIMIT, page_size=None,
        retry_limit=None) -> Result:
    return Runner(sc, step_limit, page_size, retry_limit).run()


def check(engine: Engine, expects: list[Expect], prefix: str = "") -> list[str]:
    out = []
    for e in expects:
        err = _check_one(engine, e)
        if err:
            out.append(f"{prefix}expect {e} (line {e.line}): {err}")
    return out


def _check_one(engine: Engine, e: Expect) -> Optional[str]:
    a = e.args
    if e.kind == "reg":
        proc = engine.roots.get(a[0])
        if proc is None:
            return f"no process {a[0]!r}"
        got = proc.regs.get(a[1])
        return None if got == a[2] else f"got {got!r}"
    if e.kind == "exit":
        proc = engine.roots.get(a[0])
        if proc is None:
            return f"no process {a[0]!r}"
        return None if proc.exit_code == a[1] else f"got {proc.exit_code!r}"
    if e.kind == "durable":
        (name, site), pages = a
        got = engine.store.load(name, site).pages()
        return None if got == pages else f"got {list(got)}"
    if e.kind in ("current", "retainers", "readretainers", "nolock"):
        (name, site) = a[0]
        tl = engine.lock_table(site).get(name)
        if e.kind == "nolock":
            return None if tl is None else f"t-lock present: {tl.state_key()}"
        if tl is None:
            return "no t-lock"
        if e.kind == "current":
            got = tl.current.pages()
            return None if got == a[1] else f"got {list(got)}"
        if e.kind == "retainers":
            got = tuple(str(t) for t in tl.write_retainer_tids())
        else:
            got = tuple(str(t) for t in tl.read_retainers)
        return None if got == a[1] else f"got {list(got)}"
    if e.kind == "norecords":
        recs = [str(r.tid) for r in engine.all_records()]
        return None if not recs else f"records remain: {recs}"
    if e.kind == "nolocks":
        held = [(s, n) for s in engine.net.sites for n in engine.lock_table(s).locks]
        return None if not held else f"t-locks remain: {held}"
    if e.kind == "status":
        got = status_of(engine.tracer.records, Tid.parse(a[0]))
        return None if got == a[1] else f"got {got}"
    if e.kind == "counter":
        name, op, n = a
        got = counters(engine).get(name, 0)
        ok = {"==": got == n, "<=": got <= n, ">=": got >= n}[op]
        return None if ok else f"got {got}"
    return f"unknown expectation {e.kind}"
