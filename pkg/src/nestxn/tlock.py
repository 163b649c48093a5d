"""Transaction synchronization site (TSS) lock and recovery records.

One TLock exists per open file copy. It tracks who holds the lock, who
retains it after closing, and a version stack of saved file states with one
entry per write retainer, ordered from the outermost transaction at the
bottom to the innermost on top.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from .filestore import DurableStore, FileState, FileStoreError, NoSuchPage
from .ids import SiteId, Tid, chain_accessible, is_ancestor, is_superior


class LockMode(str, enum.Enum):
    READ = "READ"
    WRITE = "WRITE"

    def __str__(self):
        return self.value


@dataclass
class WriteHolder:
    tid: Tid
    saved: FileState
    using: set = field(default_factory=set)


@dataclass
class TLock:
    file: str
    current: FileState
    read_holders: dict = field(default_factory=dict)  # Tid -> set of using sites
    write_holder: Optional[WriteHolder] = None
    read_retainers: list = field(default_factory=list)
    write_retainers: list = field(default_factory=list)  # [(Tid, FileState)], top is last
    # set between a top-level transaction's TssCommit and the end of its
    # two-phase commit; no one may open the file meanwhile
    committing: Optional[Tid] = None

    def holders(self) -> list[Tid]:
        if self.write_holder is not None:
            return [self.write_holder.tid]
        return list(self.read_holders)

    def write_retainer_tids(self) -> list[Tid]:
        return [t for t, _ in self.write_retainers]

    def retains_write(self, t: Tid) -> bool:
        return any(e == t for e, _ in self.write_retainers)

    def is_empty(self) -> bool:
        return (not self.read_holders and self.write_holder is None
                and not self.read_retainers and not self.write_retainers
                and self.committing is None)

    def state_key(self) -> tuple:
        wh = None
        if self.write_holder is not None:
            w = self.write_holder
            wh = (w.tid, w.saved.pages(), tuple(sorted(w.using)))
        return (
            self.file,
            self.current.pages(),
            tuple(sorted((t, tuple(sorted(u))) for t, u in self.read_holders.items())),
            wh,
            tuple(self.read_retainers),
            tuple((t, s.pages()) for t, s in self.write_retainers),
            self.committing,
        )


@dataclass
class AccessResult:
    ok: bool
    value: Optional[str] = None
    reason: str = ""


def _noop(kind, **detail):
    pass


class LockTable:
    """All t-locks kept at one TSS site."""

    def __init__(self, site: SiteId, store: DurableStore,
                 emit: Callable[..., None] = _noop):
        self.site = site
        self.store = store
        self.emit = emit
        self.locks: dict[str, TLock] = {}

    def get(self, name: str) -> Optional[TLock]:
        return self.locks.get(name)

    def state_key(self) -> tuple:
        return tuple(self.locks[k].state_key() for k in sorted(self.locks))

    def _discard_if_empty(self, tl: TLock) -> None:
        if tl.is_empty() and self.locks.get(tl.file) is tl:
            del self.locks[tl.file]
            self.emit("discard", file=tl.file)

    # -- open / close ---------------------------------------------------

    def open(self, name: str, t: Tid, mode: LockMode, us: SiteId) -> bool:
        tl = self.locks.get(name)
        if tl is None:
            tl = TLock(name, self.store.load(name, self.site))
            self.locks[name] = tl
        reason = self._conflict(tl, t, mode)
        if reason:
            self.emit("denial", file=name, tid=t, mode=mode, why=reason)
            self._discard_if_empty(tl)
            return False
        if mode is LockMode.WRITE:
            if tl.write_holder is not None:
                tl.write_holder.using.add(us)
            else:
                using = tl.read_holders.pop(t, set())
                using.add(us)
                tl.write_holder = WriteHolder(t, tl.current, using)
        elif tl.write_holder is not None:
            # t itself holds write; that covers reading
            tl.write_holder.using.add(us)
        else:
            tl.read_holders.setdefault(t, set()).add(us)
        self.emit("grant", file=name, tid=t, mode=mode, us=us,
                  version=tl.current.digest())
        return True

    @staticmethod
    def _conflict(tl: TLock, t: Tid, mode: LockMode) -> str:
        if tl.committing is not None:
            return "committing"
        if tl.write_holder is not None and tl.write_holder.tid != t:
            return "write-held"
        for r, _ in tl.write_retainers:
            if not is_ancestor(r, t):
                return "write-retained"
        if mode is LockMode.WRITE:
            if any(h != t for h in tl.read_holders):
                return "read-held"
            for r in tl.read_retainers:
                if not is_ancestor(r, t):
                    return "read-retained"
        return ""

    def close(self, name: str, t: Tid) -> bool:
        tl = self.locks.get(name)
        if tl is None:
            return False
        if t in tl.read_holders:
            del tl.read_holders[t]
            if t not in tl.read_retainers and not tl.retains_write(t):
                tl.read_retainers.append(t)
            self.emit("close", file=name, tid=t, mode=LockMode.READ)
            return True
        if tl.write_holder is not None and tl.write_holder.tid == t:
            self._retire_write_holder(tl)
            if t in tl.read_retainers:
                tl.read_retainers.remove(t)
            self.emit("close", file=name, tid=t, mode=LockMode.WRITE)
            return True
        self.emit("stale-close", file=name, tid=t)
        return False

    def _retire_write_holder(self, tl: TLock) -> None:
        wh = tl.write_holder
        tl.write_holder = None
        if not (tl.write_retainers and tl.write_retainers[-1][0] == wh.tid):
            tl.write_retainers.append((wh.tid, wh.saved))
            self.emit("push", file=tl.file, tid=wh.tid, version=wh.saved.digest())

    def _force_close(self, tl: TLock, dead: Callable[[Tid], bool]) -> None:
        # dead holders are not given read retention, only write holders are
        # pushed so the following pops can restore their saved state
        for h in [h for h in tl.read_holders if dead(h)]:
            del tl.read_holders[h]
            self.emit("force-close", file=tl.file, tid=h, mode=LockMode.READ)
        if tl.write_holder is not None and dead(tl.write_holder.tid):
            self.emit("force-close", file=tl.file, tid=tl.write_holder.tid,
                      mode=LockMode.WRITE)
            self._retire_write_holder(tl)

    def _pop_while(self, tl: TLock, cond: Callable[[Tid], bool]) -> bool:
        last = None
        while tl.write_retainers and cond(tl.write_retainers[-1][0]):
            last = tl.write_retainers.pop()
            self.emit("pop", file=tl.file, tid=last[0], version=last[1].digest())
        if last is not None:
            tl.current = last[1]
            self.emit("restore", file=tl.file, version=last[1].digest())
            return True
        return False

    # -- commit / abort -------------------------------------------------

    def commit(self, name: str, t: Tid) -> bool:
        """Run the commit algorithm for t on one file; False if t retains nothing."""
        tl = self.locks.get(name)
        if tl is None:
            return False
        inferior = lambda x: is_superior(t, x)
        self._force_close(tl, inferior)
        tl.read_retainers = [r for r in tl.read_retainers if not inferior(r)]
        self._pop_while(tl, inferior)

        p = t.parent
        retained = False
        if t in tl.read_retainers:
            retained = True
            tl.read_retainers.remove(t)
            if p is not None and p not in tl.read_retainers and not tl.retains_write(p):
                tl.read_retainers.append(p)
        if tl.write_retainers and tl.write_retainers[-1][0] == t:
            retained = True
            if p is None:
                tl.write_retainers.pop()
                tl.committing = t
                self.emit("pop", file=name, tid=t, version=tl.current.digest())
            elif tl.retains_write(p):
                _, saved = tl.write_retainers.pop()
                self.emit("pop", file=name, tid=t, version=saved.digest())
            else:
                _, saved = tl.write_retainers[-1]
                tl.write_retainers[-1] = (p, saved)
                if p in tl.read_retainers:
                    tl.read_retainers.remove(p)
                self.emit("relabel", file=name, tid=t, to=p, version=saved.digest())
        self.emit("commit", file=name, tid=t, retained=retained)
        self._discard_if_empty(tl)
        return retained

    def abort(self, name: str, t: Tid) -> None:
        tl = self.locks.get(name)
        if tl is None:
            return
        desc = lambda x: is_ancestor(t, x)
        self._force_close(tl, desc)
        tl.read_retainers = [r for r in tl.read_retainers if not desc(r)]
        popped = self._pop_while(tl, desc)
        if not popped and tl.committing is not None and is_ancestor(t, tl.committing):
            # the top-level commit already dropped its stack entry; the
            # durable copy is still the original
            tl.current = self.store.load(name, self.site)
            tl.committing = None
            self.emit("restore", file=name, version=tl.current.digest(), source="durable")
        self._discard_if_empty(tl)

    def finish_commit(self, name: str, t: Tid) -> Optional[FileState]:
        """Drop the t-lock after phase two; returns the state to make durable."""
        tl = self.locks.get(name)
        if tl is None or tl.committing != t:
            return None
        tl.committing = None
        self._discard_if_empty(tl)
        return tl.current

    # -- orphan removal -------------------------------------------------

    def sweep(self, name: str, accessible) -> None:
        tl = self.locks.get(name)
        if tl is None:
            return
        dead = lambda x: not chain_accessible(x, accessible)
        stranded = []
        for h, using in tl.read_holders.items():
            if not dead(h) and not set(using) <= set(accessible):
                stranded.append(h)
        wh = tl.write_holder
        if wh is not None and not dead(wh.tid) and not wh.using <= set(accessible):
            stranded.append(wh.tid)

        self._force_close(tl, dead)
        tl.read_retainers = [r for r in tl.read_retainers if not dead(r)]
        for i, (r, _) in enumerate(tl.write_retainers):
            if dead(r):
                keep = i
                self._pop_while(tl, lambda x: len(tl.write_retainers) > keep)
                break
        for h in stranded:
            self.emit("sweep-us", file=name, tid=h)
            self.abort(name, h)
        if name in self.locks:
            self._discard_if_empty(tl)

    def sweep_all(self, accessible) -> None:
        for name in sorted(self.locks):
            self.sweep(name, accessible)

    # -- data access ----------------------------------------------------

    def access(self, name: str, t: Tid, op: str, idx: int,
               content: Optional[str] = None) -> AccessResult:
        tl = self.locks.get(name)
        if tl is None:
            return AccessResult(False, reason="no t-lock")
        is_writer = tl.write_holder is not None and tl.write_holder.tid == t
        if op == "read":
            if not (is_writer or t in tl.read_holders):
                return AccessResult(False, reason="not a holder")
            try:
                return AccessResult(True, tl.current.page(idx))
            except NoSuchPage as e:
                return AccessResult(False, reason=str(e))
        if op == "write":
            if not is_writer:
                return AccessResult(False, reason="not the write holder")
            if len(content.encode()) > self.store.page_size:
                return AccessResult(False, reason="page too large")
            try:
                tl.current = tl.current.with_page(idx, content)
            except (NoSuchPage, FileStoreError) as e:
                return AccessResult(False, reason=str(e))
            return AccessResult(True, content)
        raise ValueError(f"unknown access {op!r}")


def tss_open(table: LockTable, f: str, t: Tid, mode: LockMode, us: SiteId) -> bool:
    return table.open(f, t, mode, us)


def tss_close(table: LockTable, f: str, t: Tid) -> bool:
    return table.close(f, t)


def tss_commit(table: LockTable, f: str, t: Tid) -> bool:
    return table.commit(f, t)


def tss_abort(table: LockTable, f: str, t: Tid) -> None:
    table.abort(f, t)


def orphan_sweep_file(table: LockTable, f: str, accessible) -> None:
    table.sweep(f, accessible)


def read_or_write_request(table: LockTable, f: str, t: Tid, op: str, idx: int,
                          content: Optional[str] = None) -> AccessResult:
    return table.access(f, t, op, idx, content)
