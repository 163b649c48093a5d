"""Deterministic partitionable network and the event loop that drives sites.

Sites in one partition reach each other; nothing crosses partitions.
Messages between a pair of sites are delivered in send order. Every event
(remote message, local call, timer) sits in a single heap ordered by
(due step, from, to, per-pair sequence), so a run is a pure function of its
inputs.
"""
from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .ids import SiteId


class TopologyError(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, (set, frozenset)):
        return "{" + ",".join(str(x) for x in sorted(v)) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_fmt(x) for x in v) + "]"
    return str(v)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    site: Optional[SiteId]
    kind: str
    detail: tuple = ()

    def get(self, key, default=None):
        for k, v in self.detail:
            if k == key:
                return v
        return default

    def render(self) -> str:
        site = "-" if self.site is None else f"s{self.site}"
        parts = [f"{self.step:06d}", site, self.kind]
        parts += [f"{k}={_fmt(v)}" for k, v in self.detail]
        return " ".join(parts)


class Tracer:
    def __init__(self):
        self.records: list[TraceRecord] = []
        self.clock: Callable[[], int] = lambda: 0

    def emit(self, site, kind, **detail):
        self.records.append(TraceRecord(self.clock(), site, kind, tuple(detail.items())))

    def for_site(self, site) -> Callable[..., None]:
        return lambda kind, **detail: self.emit(site, kind, **detail)

    def lines(self) -> list[str]:
        return [r.render() for r in self.records]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())


class Msg:
    __slots__ = ("kind", "fields")

    def __init__(self, kind: str, **fields):
        self.kind = kind
        self.fields = fields

    def __getattr__(self, name):
        try:
            return self.fields[name]
        except KeyError:
            raise AttributeError(name) from None

    def __repr__(self):
        return f"Msg({self.kind}, {self.fields})"


@dataclass(order=True)
class Envelope:
    due: int
    src: SiteId
    dst: SiteId
    seq: int
    msg: Msg = field(compare=False)
    timer: bool = field(default=False, compare=False)


@dataclass
class Metrics:
    remote: Counter = field(default_factory=Counter)
    local: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    remote_by_phase: Counter = field(default_factory=Counter)
    local_by_phase: Counter = field(default_factory=Counter)

    def summary(self) -> dict[str, int]:
        return {
            "remote_messages": sum(self.remote.values()),
            "local_calls": sum(self.local.values()),
            "dropped": sum(self.dropped.values()),
        }


class Network:
    def __init__(self, sites: Iterable[SiteId], tracer: Optional[Tracer] = None,
                 phase_of: Callable[[str], str] = lambda kind: "other"):
        self.sites = sorted(set(sites))
        self.tracer = tracer or Tracer()
        self.tracer.clock = lambda: self.now
        self.phase_of = phase_of
        self.partition: dict[SiteId, int] = {s: 0 for s in self.sites}
        everyone = frozenset(self.sites)
        self.tables: dict[SiteId, frozenset] = {s: everyone for s in self.sites}
        self.now = 0
        self.metrics = Metrics()
        self._heap: list[Envelope] = []
        self._pair_seq: Counter = Counter()
        self.deliver: Callable[[Envelope], None] = lambda env: None
        self.on_topology: Callable[[SiteId, frozenset, frozenset], None] = lambda s, o, n: None

    # -- queries ----------------------------------------------------------

    def accessible(self, site: SiteId) -> frozenset:
        return self.tables[site]

    def connected(self, a: SiteId, b: SiteId) -> bool:
        return self.partition[a] == self.partition[b]

    def groups(self) -> list[frozenset]:
        by: dict[int, set] = {}
        for s in self.sites:
            by.setdefault(self.partition[s], set()).add(s)
        return sorted((frozenset(g) for g in by.values()), key=min)

    def pending(self) -> list[Envelope]:
        return sorted(self._heap)

    def quiescent(self) -> bool:
        return not self._heap

    def next_time(self) -> Optional[int]:
        if not self._heap:
            return None
        return max(self.now + 1, self._heap[0].due)

    # -- sending ----------------------------------------------------------

    def _push(self, src, dst, msg, due, timer=False):
        self._pair_seq[(src, dst)] += 1
        heapq.heappush(self._heap, Envelope(due, src, dst, self._pair_seq[(src, dst)], msg, timer))

    def send(self, src: SiteId, dst: SiteId, kind: str, **fields) -> None:
        msg = Msg(kind, **fields)
        phase = self.phase_of(kind)
        if src == dst:
            # a local call: no transport, run after the current handler
            self.metrics.local[kind] += 1
            self.metrics.local_by_phase[phase] += 1
            self._push(src, dst, msg, self.now)
            return
        if not self.connected(src, dst):
            self.metrics.dropped[kind] += 1
            self.tracer.emit(src, "drop", msg=kind, to=dst)
            return
        self.metrics.remote[kind] += 1
        self.metrics.remote_by_phase[phase] += 1
        self.tracer.emit(src, "send", msg=kind, to=dst, **_brief(fields))
        self._push(src, dst, msg, self.now)

    def timer(self, site: SiteId, delay: int, kind: str, **fields) -> None:
        self._push(site, site, Msg(kind, **fields), self.now + max(delay, 0), timer=True)

    # -- running ----------------------------------------------------------

    def step(self) -> Optional[Envelope]:
        if not self._heap:
            return None
        env = heapq.heappop(self._heap)
        self.now = max(self.now + 1, env.due)
        if env.src != env.dst and not self.connected(env.src, env.dst):
            self.metrics.dropped[env.msg.kind] += 1
            self.tracer.emit(env.dst, "drop", msg=env.msg.kind, frm=env.src)
            return env
        if env.src != env.dst:
            self.tracer.emit(env.dst, "recv", msg=env.msg.kind, frm=env.src)
        self.deliver(env)
        return env

    def repartition(self, groups: Iterable[Iterable[SiteId]]) -> list[SiteId]:
        """Install a new partition; returns sites whose topology changed."""
        groups = [frozenset(g) for g in groups]
        seen: set = set()
        for g in groups:
            if not g:
                raise TopologyError("empty partition")
            if seen & g:
                raise TopologyError(f"site(s) {sorted(seen & g)} in two partitions")
            seen |= g
        if seen != set(self.sites):
            raise TopologyError(f"partition does not cover sites {sorted(set(self.sites) - seen)}")
        groups.sort(key=min)
        for i, g in enumerate(groups):
            for s in g:
                self.partition[s] = i
        self.tracer.emit(None, "partition", groups=[set(g) for g in groups])

        kept = []
        for env in self._heap:
            if env.src != env.dst and not self.connected(env.src, env.dst):
                self.metrics.dropped[env.msg.kind] += 1
                self.tracer.emit(env.src, "drop", msg=env.msg.kind, to=env.dst)
            else:
                kept.append(env)
        heapq.heapify(kept)
        self._heap = kept

        changed = []
        old_tables = dict(self.tables)
        for g in groups:
            for s in sorted(g):
                if old_tables[s] != g:
                    self.tables[s] = g
                    changed.append(s)
        for s in changed:
            self.on_topology(s, old_tables[s], self.tables[s])
        return changed


def _brief(fields: dict) -> dict[str, Any]:
    out = {}
    for k in ("tid", "file", "files", "ok"):
        if k in fields:
            out[k] = fields[k]
    return out
