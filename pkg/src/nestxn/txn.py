"""Transaction manager: invocation, commit, abort and partition handling.

Every site plays three roles at once. As a transaction home site it keeps a
TransRecord for each transaction begun there. As a using site it runs member
processes. As a TSS it keeps t-locks for the file copies opened there. All
cross-site interaction goes through the Network; a handler named on_<KIND>
receives each message kind.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

from .filestore import DurableStore, FileState
from .ids import Pid, SiteId, Tid, chain_accessible, is_superior
from .net import Envelope, Msg, Network, Tracer
from .process import Action, Process, exit_success
from .tlock import LockMode, LockTable

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    UNDEFINED = "UNDEFINED"
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"

    def __str__(self):
        return self.value


class CompletionCode(str, enum.Enum):
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"
    UNKNOWN_OUTCOME = "UNKNOWN_OUTCOME"

    def __str__(self):
        return self.value


PHASES = {
    "process": ("INVOKE", "MEMBERUPD", "SPAWN", "FORKREQ", "FORKR", "EXIT",
                "EXITCODE", "DESTROY"),
    "file": ("OPEN", "OPENR", "READ", "READR", "WRITE", "WRITER", "CLOSE",
             "CLOSER", "FILEREG", "FILEREGR"),
    "lock": ("REQCOMMIT", "GRTCOMMIT", "TSSCOMMIT", "RTSSCOMMIT", "SUBCOMMIT",
             "SUBCMTFAIL"),
    "abort": ("FORCEABT", "RFORCEABT", "TSSABORT", "RTSSABORT"),
    "completion": ("TOPCOMMIT", "TOPABORT", "SUBABORT", "RESUME"),
    "commit": ("PREPARE", "VOTE", "COMMIT", "ACK"),
    "replicate": ("PROPAGATE",),
    "timer": ("RUN",),
}
_PHASE_OF = {kind: phase for phase, kinds in PHASES.items() for kind in kinds}


def phase_of(kind: str) -> str:
    return _PHASE_OF.get(kind, "other")


@dataclass
class TransRecord:
    tid: Tid
    caller: Pid
    status: Status = Status.UNDEFINED
    top_pid: Optional[Pid] = None
    members: dict = field(default_factory=dict)  # Pid -> active subtransaction Tid or None
    files: dict = field(default_factory=dict)  # (file, tss) -> LockMode
    # active | req | tsscommit | prepare | phase2 | abort-children | abort-tss
    phase: str = "active"
    awaiting: set = field(default_factory=set)
    ok: bool = True
    committing: set = field(default_factory=set)  # children past REQCOMMIT
    forcers: list = field(default_factory=list)
    participants: tuple = ()

    def add_file(self, name: str, tss: SiteId, mode: LockMode) -> None:
        key = (name, tss)
        if self.files.get(key) is not LockMode.WRITE:
            self.files[key] = mode

    def tss_sites(self) -> list[SiteId]:
        return sorted({tss for _, tss in self.files})

    def files_at(self, tss: SiteId, write_only=False) -> list[str]:
        return sorted(f for (f, s), m in self.files.items()
                      if s == tss and (not write_only or m is LockMode.WRITE))


@dataclass
class Config:
    retry_limit: int = 3
    retry_delay: int = 2
    commit_mode: str = "2pc"  # or "simple": one round trip per participant, not atomic


class SiteState:
    def __init__(self, site: SiteId, store: DurableStore, tracer: Tracer):
        self.site = site
        self.records: dict[Tid, TransRecord] = {}
        self.procs: dict[Pid, Process] = {}
        self.locks = LockTable(site, store, tracer.for_site(site))
        self.tid_serial = 0
        self.pid_serial = 0
        # tid -> (coordinator site, {file: prepared FileState})
        self.prepared: dict[Tid, tuple] = {}

    def new_pid(self) -> Pid:
        self.pid_serial += 1
        return Pid(self.site, self.pid_serial)

    def new_serial(self) -> int:
        self.tid_serial += 1
        return self.tid_serial


class Engine:
    def __init__(self, sites, store: DurableStore, programs: dict,
                 config: Optional[Config] = None, tracer: Optional[Tracer] = None):
        self.tracer = tracer or Tracer()
        self.net = Network(sites, self.tracer, phase_of)
        self.net.deliver = self._deliver
        self.net.on_topology = self.topology_change
        self.store = store
        self.programs = programs
        self.config = config or Config()
        self.sites = {s: SiteState(s, store, self.tracer) for s in self.net.sites}
        self.roots: dict[str, Process] = {}

    # -- plumbing ---------------------------------------------------------

    def emit(self, site, kind, **detail):
        self.tracer.emit(site, kind, **detail)

    def send(self, src, dst, kind, **fields):
        self.net.send(src, dst, kind, **fields)

    def acc(self, site) -> frozenset:
        return self.net.accessible(site)

    def _deliver(self, env: Envelope) -> None:
        handler = getattr(self, "on_" + env.msg.kind)
        handler(env.dst, env.src, env.msg)

    def record(self, tid: Tid) -> Optional[TransRecord]:
        return self.sites[tid.home].records.get(tid)

    def all_records(self):
        for s in self.net.sites:
            yield from self.sites[s].records.values()

    def process(self, pid: Pid) -> Optional[Process]:
        return self.sites[pid.site].procs.get(pid)

    def spawn_root(self, label: str, site: SiteId, script) -> Process:
        """Start a non-transaction process running an inline script."""
        st = self.sites[site]
        proc = Process(st.new_pid(), label, tuple(script))
        st.procs[proc.pid] = proc
        self.roots[label] = proc
        self.net.timer(site, 0, "RUN", pid=proc.pid)
        return proc

    def _start(self, site, pid, label, program, tid, top, parent_pid=None) -> Process:
        proc = Process(pid, label, tuple(self.programs[program]), tid=tid, top=top,
                       parent_pid=parent_pid)
        self.sites[site].procs[pid] = proc
        self.net.timer(site, 0, "RUN", pid=pid)
        return proc

    # -- process execution --------------------------------------------------

    def on_RUN(self, site, src, m: Msg):
        proc = self.sites[site].procs.get(m.pid)
        if proc is None or not proc.alive:
            return
        wake = m.fields.get("wake")
        if wake and proc.waiting == (wake,):
            proc.waiting = None
            proc.state = "ready"
            if wake == "retry":
                self._send_open(proc)
                return
        if proc.state == "ready":
            self._run(proc)

    def _run(self, proc: Process) -> None:
        while proc.state == "ready":
            action = proc.current()
            if action is None:
                self._exit(proc, True)
                return
            self.emit(proc.site, "action", pid=proc.pid, tid=proc.tid or "-", op=str(action))
            getattr(self, "_do_" + action.op)(proc, action)

    def _block(self, proc, *waiting):
        proc.state = "blocked"
        proc.waiting = tuple(waiting)
        if waiting[0] == "site" and waiting[1] not in self.acc(proc.site):
            # the request was dropped; nobody will ever answer it
            self._fail(proc, f"site {waiting[1]} inaccessible")

    def _resume(self, proc: Process, value=None) -> None:
        action = proc.current()
        if action is not None and action.dest:
            proc.regs[action.dest] = str(value)
        proc.pc += 1
        proc.waiting = None
        proc.state = "ready"
        self.net.timer(proc.site, 0, "RUN", pid=proc.pid)

    def _advance(self, proc: Process, value=None) -> None:
        action = proc.current()
        if action.dest:
            proc.regs[action.dest] = str(value)
        proc.pc += 1

    def _fail(self, proc: Process, why: str) -> None:
        self.emit(proc.site, "failure", pid=proc.pid, why=why)
        self._exit(proc, False)

    def _exit(self, proc: Process, success: bool) -> None:
        if success and proc.open_files:
            self.emit(proc.site, "failure", pid=proc.pid, why="exit with open files")
            success = False
        if success and proc.top and proc.unreaped:
            self.emit(proc.site, "failure", pid=proc.pid, why="exit before children finished")
            success = False
        proc.state = "halted"
        proc.waiting = None
        proc.exit_code = "ok" if success else "fail"
        self.emit(proc.site, "exit", pid=proc.pid, tid=proc.tid or "-", code=proc.exit_code)
        if proc.tid is not None:
            self.send(proc.site, proc.tid.home, "EXIT", tid=proc.tid, pid=proc.pid, ok=success)
        if proc.parent_pid is not None:
            self.send(proc.site, proc.parent_pid.site, "EXITCODE", pid=proc.parent_pid,
                      child=proc.pid, code=proc.exit_code)

    def _destroy(self, proc: Process) -> None:
        if proc.alive:
            proc.state = "destroyed"
            proc.waiting = None
            self.emit(proc.site, "destroy", pid=proc.pid, tid=proc.tid or "-")

    def _do_sleep(self, proc, a: Action):
        proc.pc += 1
        self._block(proc, "sleep")
        self.net.timer(proc.site, int(a.args[0]), "RUN", pid=proc.pid, wake="sleep")

    def _do_exit(self, proc, a: Action):
        self._exit(proc, exit_success(a, proc.regs))

    def _do_relcall(self, proc, a: Action):
        program, target = a.args
        if target not in self.acc(proc.site):
            self._advance(proc, CompletionCode.ABORTED)
            return
        serial = self.sites[target].new_serial()
        tid = proc.tid.child(target, serial) if proc.tid else Tid.top(target, serial)
        proc.sub = tid
        if proc.tid is not None:
            self.send(proc.site, proc.tid.home, "MEMBERUPD", tid=proc.tid, pid=proc.pid, sub=tid)
        self.send(proc.site, target, "INVOKE", tid=tid, program=program, caller=proc.pid)
        self._block(proc, "relcall", tid)

    def _do_fork(self, proc, a: Action):
        program, target = a.args
        proc.pc += 1
        if target not in self.acc(proc.site):
            self.emit(proc.site, "failure", pid=proc.pid, why=f"fork at inaccessible site {target}")
            proc.exited.append((None, "fail"))
            return
        pid = self.sites[target].new_pid()
        proc.children.append(pid)
        proc.unreaped.add(pid)
        self.send(proc.site, target, "SPAWN", tid=proc.tid, pid=pid, program=program,
                  parent=proc.pid)

    def _do_wait(self, proc, a: Action):
        for child in sorted(proc.unreaped):
            if child.site not in self.acc(proc.site):
                self._child_exited(proc, child, "fail")
        if proc.exited:
            _, code = proc.exited.popleft()
            self._advance(proc, code)
        elif not proc.unreaped:
            self._advance(proc, "fail")
        else:
            self._block(proc, "wait")

    def _child_exited(self, proc: Process, child: Pid, code: str) -> None:
        if child not in proc.unreaped:
            return
        proc.unreaped.discard(child)
        proc.exited.append((child, code))
        if proc.waiting == ("wait",):
            _, code = proc.exited.popleft()
            self._resume(proc, code)

    def _open_target(self, proc, name):
        return proc.open_files.get(name, (None, None))[0]

    def _do_open(self, proc, a: Action):
        name, mode = a.args
        mode = LockMode(mode)
        if proc.tid is None:
            self._fail(proc, "file access outside a transaction")
            return
        held = proc.open_files.get(name)
        if held and (held[1] is LockMode.WRITE or mode is LockMode.READ):
            proc.pc += 1
            return
        candidates = [s for s in self.store.replicas(name) if s in self.acc(proc.site)]
        if not candidates:
            self._fail(proc, f"no accessible copy of {name}")
            return
        proc.attempts = 0
        proc.scratch = {"file": name, "mode": mode, "tss": min(candidates)}
        self._send_open(proc)

    def _send_open(self, proc):
        sc = proc.scratch
        self.send(proc.site, sc["tss"], "OPEN", tid=proc.tid, file=sc["file"],
                  mode=sc["mode"], us=proc.site, pid=proc.pid)
        self._block(proc, "site", sc["tss"], "OPENR")

    def _io(self, proc, a: Action, op, content=None):
        name, idx = a.args[0], int(a.args[1])
        tss = self._open_target(proc, name)
        if tss is None:
            self._fail(proc, f"{name} not open")
            return
        kind = "READ" if op == "read" else "WRITE"
        self.send(proc.site, tss, kind, tid=proc.tid, file=name, page=idx,
                  content=content, pid=proc.pid)
        self._block(proc, "site", tss, kind + "R")

    def _do_read(self, proc, a):
        proc.scratch = {}
        self._io(proc, a, "read")

    def _do_write(self, proc, a):
        proc.scratch = {}
        self._io(proc, a, "write", a.args[2])

    def _do_update(self, proc, a):
        # read-modify-write: append text to the page
        proc.scratch = {"update": a.args[2]}
        self._io(proc, a, "read")

    def _do_close(self, proc, a):
        name = a.args[0]
        tss = self._open_target(proc, name)
        if tss is None:
            self._fail(proc, f"{name} not open")
            return
        self.send(proc.site, tss, "CLOSE", tid=proc.tid, file=name, pid=proc.pid)
        self._block(proc, "site", tss, "CLOSER")

    def _waiting_for(self, site, pid, kind) -> Optional[Process]:
        proc = self.sites[site].procs.get(pid)
        if proc is None or not proc.alive or not proc.waiting:
            return None
        if proc.waiting[0] == "site" and proc.waiting[2] == kind:
            return proc
        return None

    # -- using-site replies ---------------------------------------------

    def on_OPENR(self, site, src, m):
        proc = self._waiting_for(site, m.pid, "OPENR")
        if proc is None:
            if m.ok:
                self._release(site, src, m.tid, m.file)
            return
        if m.ok:
            self.send(site, proc.tid.home, "FILEREG", tid=proc.tid, file=m.file, tss=src,
                      mode=proc.scratch["mode"], pid=proc.pid)
            self._block(proc, "site", proc.tid.home, "FILEREGR")
            return
        proc.attempts += 1
        if proc.attempts > self.config.retry_limit:
            self._fail(proc, f"open {m.file} denied")
            return
        self._block(proc, "retry")
        self.net.timer(site, self.config.retry_delay, "RUN", pid=proc.pid, wake="retry")

    def _release(self, site, tss, tid, name) -> None:
        # a lock granted to a transaction that is already being aborted
        # would never be covered by its TSSABORT fan-out
        self.send(site, tss, "TSSABORT", tid=tid, files=[name], release=True)

    def on_FILEREGR(self, site, src, m):
        proc = self._waiting_for(site, m.pid, "FILEREGR")
        if not m.ok:
            self._release(site, m.tss, m.tid, m.file)
        if proc is None:
            return
        sc = proc.scratch
        if not m.ok:
            self._fail(proc, "transaction gone")
            return
        proc.open_files[sc["file"]] = (sc["tss"], sc["mode"])
        self._resume(proc)

    def on_READR(self, site, src, m):
        proc = self._waiting_for(site, m.pid, "READR")
        if proc is None:
            return
        if not m.ok:
            self._fail(proc, f"read denied: {m.reason}")
            return
        suffix = proc.scratch.pop("update", None)
        if suffix is None:
            self._resume(proc, m.value)
            return
        self.send(site, src, "WRITE", tid=proc.tid, file=m.file, page=m.page,
                  content=m.value + suffix, pid=proc.pid)
        self._block(proc, "site", src, "WRITER")

    def on_WRITER(self, site, src, m):
        proc = self._waiting_for(site, m.pid, "WRITER")
        if proc is None:
            return
        if not m.ok:
            self._fail(proc, f"write denied: {m.reason}")
            return
        self._resume(proc, m.value)

    def on_CLOSER(self, site, src, m):
        proc = self._waiting_for(site, m.pid, "CLOSER")
        if proc is None:
            return
        proc.open_files.pop(m.file, None)
        self._resume(proc)

    def on_EXITCODE(self, site, src, m):
        proc = self.sites[site].procs.get(m.pid)
        if proc is not None and proc.alive:
            self._child_exited(proc, m.child, m.code)

    def on_DESTROY(self, site, src, m):
        proc = self.sites[site].procs.get(m.pid)
        if proc is not None:
            self._destroy(proc)

    def _complete_call(self, site, caller: Pid, tid: Tid, code) -> None:
        proc = self.sites[site].procs.get(caller)
        if proc is None or not proc.alive or proc.waiting != ("relcall", tid):
            return
        proc.sub = None
        if proc.tid is not None:
            self.send(site, proc.tid.home, "MEMBERUPD", tid=proc.tid, pid=proc.pid,
                      sub=None, old=tid)
        self.emit(site, "completion", pid=caller, tid=tid, code=code)
        self._resume(proc, code)

    def on_RESUME(self, site, src, m):
        self._complete_call(site, m.pid, m.tid, m.code)

    def on_SUBABORT(self, site, src, m):
        self._complete_call(site, m.caller, m.tid, CompletionCode.ABORTED)

    def on_TOPCOMMIT(self, site, src, m):
        self._complete_call(site, m.caller, m.tid, CompletionCode.COMMITTED)

    def on_TOPABORT(self, site, src, m):
        self._complete_call(site, m.caller, m.tid, CompletionCode.ABORTED)

    # -- TSS role ---------------------------------------------------------

    def on_OPEN(self, site, src, m):
        ok = self.sites[site].locks.open(m.file, m.tid, m.mode, m.us)
        self.send(site, src, "OPENR", pid=m.pid, tid=m.tid, file=m.file, ok=ok)

    def on_READ(self, site, src, m):
        res = self.sites[site].locks.access(m.file, m.tid, "read", m.page)
        if res.ok:
            self.emit(site, "op", tid=m.tid, file=m.file, page=m.page, op="read", value=res.value)
        self.send(site, src, "READR", pid=m.pid, file=m.file, page=m.page, ok=res.ok,
                  value=res.value, reason=res.reason)

    def on_WRITE(self, site, src, m):
        res = self.sites[site].locks.access(m.file, m.tid, "write", m.page, m.content)
        if res.ok:
            self.emit(site, "op", tid=m.tid, file=m.file, page=m.page, op="write", value=m.content)
        self.send(site, src, "WRITER", pid=m.pid, file=m.file, ok=res.ok, value=res.value,
                  reason=res.reason)

    def on_CLOSE(self, site, src, m):
        # a close from a transaction that no longer holds the lock is ignored
        self.sites[site].locks.close(m.file, m.tid)
        self.send(site, src, "CLOSER", pid=m.pid, file=m.file)

    def on_TSSCOMMIT(self, site, src, m):
        locks = self.sites[site].locks
        results = [locks.commit(f, m.tid) for f in m.files]
        self.send(site, src, "RTSSCOMMIT", tid=m.tid, ok=all(results))

    def on_TSSABORT(self, site, src, m):
        st = self.sites[site]
        files = list(m.files or ())
        prepared = st.prepared.pop(m.tid, None)
        if prepared is not None:
            files += [f for f in prepared[1] if f not in files]
            self._drop_prepared_log(site, m.tid)
        for f in files:
            st.locks.abort(f, m.tid)
        if not m.fields.get("release"):
            self.send(site, src, "RTSSABORT", tid=m.tid)

    # -- home site: membership ------------------------------------------

    def on_INVOKE(self, site, src, m):
        st = self.sites[site]
        rec = TransRecord(m.tid, m.caller)
        pid = st.new_pid()
        rec.top_pid = pid
        rec.members[pid] = None
        st.records[m.tid] = rec
        self.emit(site, "begin", tid=m.tid, caller=m.caller, program=m.program)
        self._start(site, pid, m.program, m.program, m.tid, True)

    def on_MEMBERUPD(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is None:
            return
        if m.pid in rec.members:
            rec.members[m.pid] = m.sub
        old = m.fields.get("old")
        if old is not None:
            rec.committing.discard(old)

    def on_SPAWN(self, site, src, m):
        if m.tid is None:
            self._start(site, m.pid, m.program, m.program, None, False, m.parent)
            return
        # the new member must be on the home site's list before it runs
        self.send(site, m.tid.home, "FORKREQ", tid=m.tid, pid=m.pid, site=site,
                  program=m.program, parent=m.parent)

    def on_FORKREQ(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        ok = rec is not None and rec.phase == "active"
        if ok:
            rec.members[m.pid] = None
        self.send(site, src, "FORKR", tid=m.tid, pid=m.pid, program=m.program,
                  parent=m.parent, ok=ok)

    def on_FORKR(self, site, src, m):
        if m.ok:
            self._start(site, m.pid, m.program, m.program, m.tid, False, m.parent)
        else:
            self.emit(site, "failure", pid=m.pid, why="transaction gone before fork")
            self.send(site, m.parent.site, "EXITCODE", pid=m.parent, child=m.pid, code="fail")

    def on_FILEREG(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        ok = rec is not None and rec.phase == "active"
        if ok:
            rec.add_file(m.file, m.tss, m.mode)
        self.send(site, src, "FILEREGR", pid=m.pid, tid=m.tid, file=m.file, tss=m.tss, ok=ok)

    def on_EXIT(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is None or rec.phase != "active":
            return
        rec.members.pop(m.pid, None)
        if m.pid != rec.top_pid:
            return
        if not m.ok:
            self.abort_transaction(rec, "top-level process failed")
        elif rec.members:
            self.abort_transaction(rec, "members still running at commit")
        elif rec.tid.is_top:
            self.toplevel_commit(rec)
        else:
            self.subtransaction_commit(rec)

    def _set_status(self, rec: TransRecord, status: Status, why="") -> None:
        rec.status = status
        self.emit(rec.tid.home, "status", tid=rec.tid, status=status, why=why)

    def _remove(self, rec: TransRecord) -> None:
        self.sites[rec.tid.home].records.pop(rec.tid, None)
        self.emit(rec.tid.home, "remove", tid=rec.tid)

    def _destroy_members(self, rec: TransRecord) -> None:
        home = rec.tid.home
        for pid in sorted(rec.members):
            if pid.site == home:
                proc = self.sites[home].procs.get(pid)
                if proc is not None:
                    self._destroy(proc)
            elif pid.site in self.acc(home):
                self.send(home, pid.site, "DESTROY", pid=pid)
        rec.members.clear()

    # -- subtransaction commit ----------------------------------------------

    def subtransaction_commit(self, rec: TransRecord) -> None:
        home = rec.tid.home
        if any(s not in self.acc(home) for s in rec.tss_sites()):
            self.abort_transaction(rec, "participant TSS inaccessible")
            return
        rec.phase = "req"
        files = sorted((f, s, m) for (f, s), m in rec.files.items())
        self.send(home, rec.tid.parent.home, "REQCOMMIT", tid=rec.tid, files=files)

    def on_REQCOMMIT(self, site, src, m):
        prec = self.sites[site].records.get(m.tid.parent)
        if prec is None or prec.phase != "active":
            self.send(site, src, "GRTCOMMIT", tid=m.tid, ok=False)
            return
        for name, tss, mode in m.files:
            prec.add_file(name, tss, mode)
        prec.committing.add(m.tid)
        self.send(site, src, "GRTCOMMIT", tid=m.tid, ok=True)

    def on_GRTCOMMIT(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is None or rec.phase != "req":
            return
        if not m.ok:
            self.abort_transaction(rec, "parent refused commit")
            return
        self._send_tsscommit(rec)

    def _send_tsscommit(self, rec: TransRecord) -> None:
        home = rec.tid.home
        rec.phase = "tsscommit"
        rec.ok = True
        rec.awaiting = set(rec.tss_sites())
        if not rec.awaiting:
            self._tsscommit_done(rec)
            return
        for tss in sorted(rec.awaiting):
            self.send(home, tss, "TSSCOMMIT", tid=rec.tid, files=rec.files_at(tss))

    def on_RTSSCOMMIT(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is None or rec.phase != "tsscommit" or src not in rec.awaiting:
            return
        rec.awaiting.discard(src)
        rec.ok = rec.ok and m.ok
        if not rec.awaiting:
            self._tsscommit_done(rec)

    def _tsscommit_done(self, rec: TransRecord) -> None:
        home = rec.tid.home
        if rec.tid.is_top:
            if rec.ok:
                self.two_phase_commit(rec)
            else:
                self.abort_transaction(rec, "TssCommit failed")
            return
        parent_home = rec.tid.parent.home
        if rec.ok:
            self._set_status(rec, Status.COMMITTED)
            self.send(home, parent_home, "SUBCOMMIT", tid=rec.tid)
        else:
            self._set_status(rec, Status.ABORTED, "commit failed")
            self.send(home, parent_home, "SUBCMTFAIL", tid=rec.tid)
        self._remove(rec)

    def on_SUBCOMMIT(self, site, src, m):
        prec = self.sites[site].records.get(m.tid.parent)
        if prec is None:
            return
        prec.committing.discard(m.tid)
        for pid, sub in prec.members.items():
            if sub == m.tid:
                prec.members[pid] = None
                self.send(site, pid.site, "RESUME", pid=pid, tid=m.tid,
                          code=CompletionCode.COMMITTED)

    def on_SUBCMTFAIL(self, site, src, m):
        prec = self.sites[site].records.get(m.tid.parent)
        if prec is None:
            return
        prec.committing.discard(m.tid)
        self.abort_transaction(prec, "child commit failed")

    # -- top-level commit -------------------------------------------------

    def toplevel_commit(self, rec: TransRecord) -> None:
        home = rec.tid.home
        if any(s not in self.acc(home) for s in rec.tss_sites()):
            self.abort_transaction(rec, "participant TSS inaccessible")
            return
        self._send_tsscommit(rec)

    def two_phase_commit(self, rec: TransRecord) -> None:
        home = rec.tid.home
        # a TSS that answered RTSSCOMMIT may have been cut off since; its sweep
        # has already undone the work, so the transaction cannot commit
        if any(s not in self.acc(home) for s in rec.tss_sites()):
            self.abort_transaction(rec, "participant TSS inaccessible")
            return
        rec.participants = tuple(s for s in rec.tss_sites() if rec.files_at(s, write_only=True))
        if not rec.participants:
            self._set_status(rec, Status.COMMITTED, "read-only")
            self.send(home, rec.caller.site, "TOPCOMMIT", tid=rec.tid, caller=rec.caller)
            self._remove(rec)
            return
        if self.config.commit_mode == "simple":
            self._commit_point(rec)
            return
        rec.phase = "prepare"
        rec.awaiting = set(rec.participants)
        for tss in rec.participants:
            self.send(home, tss, "PREPARE", tid=rec.tid, files=rec.files_at(tss, True))

    def on_PREPARE(self, site, src, m):
        st = self.sites[site]
        ok = True
        states = {}
        for f in m.files:
            tl = st.locks.get(f)
            if tl is None or tl.committing != m.tid:
                ok = False
                break
            states[f] = tl.current
        if ok:
            st.prepared[m.tid] = (src, states)
            self.store.log(site).append(("prepared", m.tid, src, tuple(sorted(states))))
            self.emit(site, "prepared", tid=m.tid, files=sorted(states))
        self.send(site, src, "VOTE", tid=m.tid, ok=ok)

    def on_VOTE(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is not None and rec.phase == "prepare" and src in rec.awaiting:
            if not m.ok:
                self.abort_transaction(rec, "participant voted no")
                return
            rec.awaiting.discard(src)
            if not rec.awaiting:
                self._commit_point(rec)
            return
        if rec is not None and rec.phase == "phase2":
            self.send(site, src, "COMMIT", tid=m.tid, files=rec.files_at(src, True))
            return
        if rec is not None and rec.status is Status.ABORTED:
            self.send(site, src, "TSSABORT", tid=m.tid, files=None)
            return
        if rec is None:
            # inquiry from a participant that was cut off while prepared
            if self._logged_commit(site, m.tid):
                self.send(site, src, "COMMIT", tid=m.tid, files=None)
            else:
                self.send(site, src, "TSSABORT", tid=m.tid, files=None)

    def _logged_commit(self, site, tid) -> bool:
        return any(e[0] == "commit" and e[1] == tid for e in self.store.log(site))

    def _commit_point(self, rec: TransRecord) -> None:
        home = rec.tid.home
        self.store.log(home).append(("commit", rec.tid, rec.participants))
        self.emit(home, "commit-point", tid=rec.tid)
        self._set_status(rec, Status.COMMITTED)
        self.send(home, rec.caller.site, "TOPCOMMIT", tid=rec.tid, caller=rec.caller)
        rec.phase = "phase2"
        rec.awaiting = set(rec.participants)
        for tss in rec.participants:
            self.send(home, tss, "COMMIT", tid=rec.tid, files=rec.files_at(tss, True))

    def on_COMMIT(self, site, src, m):
        st = self.sites[site]
        prepared = st.prepared.pop(m.tid, None)
        if prepared is not None:
            states = prepared[1]
            self._drop_prepared_log(site, m.tid)
        else:
            states = {}
            for f in m.files or ():
                tl = st.locks.get(f)
                if tl is not None and tl.committing == m.tid:
                    states[f] = tl.current
        for f in sorted(states):
            self._make_durable(site, m.tid, f, states[f])
            st.locks.finish_commit(f, m.tid)
        self.send(site, src, "ACK", tid=m.tid)

    def _make_durable(self, site, tid, name, state: FileState) -> None:
        n = self.store.apply_committed(name, site, state)
        self.emit(site, "durable-write", tid=tid, file=name, pages=n)
        for other in self.store.replicas(name):
            if other != site and other in self.acc(site):
                self.send(site, other, "PROPAGATE", tid=tid, file=name, pages=state.pages())

    def on_PROPAGATE(self, site, src, m):
        n = self.store.apply_committed(m.file, site, FileState(m.pages))
        self.emit(site, "durable-write", tid=m.tid, file=m.file, pages=n)

    def on_ACK(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is None or rec.phase != "phase2":
            return
        rec.awaiting.discard(src)
        if not rec.awaiting:
            self.store.log(site).append(("end", rec.tid))
            self._remove(rec)

    def _drop_prepared_log(self, site, tid) -> None:
        lg = self.store.log(site)
        lg[:] = [e for e in lg if not (e[0] == "prepared" and e[1] == tid)]

    # -- abort ------------------------------------------------------------

    def abort_transaction(self, rec: TransRecord, why: str) -> None:
        if rec.phase.startswith("abort"):
            return
        home = rec.tid.home
        self._set_status(rec, Status.ABORTED, why)
        children = {sub for sub in rec.members.values() if sub is not None} | rec.committing
        self._destroy_members(rec)
        rec.phase = "abort-children"
        rec.awaiting = {c for c in children if c.home in self.acc(home)}
        for c in sorted(rec.awaiting):
            self.send(home, c.home, "FORCEABT", tid=c)
        if not rec.awaiting:
            self._abort_tss(rec)

    def on_FORCEABT(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is None:
            self.send(site, src, "RFORCEABT", tid=m.tid)
            return
        rec.forcers.append(src)
        if rec.phase.startswith("abort"):
            return
        self.abort_transaction(rec, "forced by parent")

    def on_RFORCEABT(self, site, src, m):
        prec = self.sites[site].records.get(m.tid.parent)
        if prec is None or prec.phase != "abort-children":
            return
        prec.awaiting.discard(m.tid)
        if not prec.awaiting:
            self._abort_tss(prec)

    def _abort_tss(self, rec: TransRecord) -> None:
        home = rec.tid.home
        rec.phase = "abort-tss"
        rec.awaiting = {s for s in rec.tss_sites() if s in self.acc(home)}
        for tss in sorted(rec.awaiting):
            self.send(home, tss, "TSSABORT", tid=rec.tid, files=rec.files_at(tss))
        if not rec.awaiting:
            self._abort_done(rec)

    def on_RTSSABORT(self, site, src, m):
        rec = self.sites[site].records.get(m.tid)
        if rec is None or rec.phase != "abort-tss":
            return
        rec.awaiting.discard(src)
        if not rec.awaiting:
            self._abort_done(rec)

    def _abort_done(self, rec: TransRecord) -> None:
        home = rec.tid.home
        kind = "TOPABORT" if rec.tid.is_top else "SUBABORT"
        self.send(home, rec.caller.site, kind, tid=rec.tid, caller=rec.caller)
        for f in rec.forcers:
            self.send(home, f, "RFORCEABT", tid=rec.tid)
        self._remove(rec)

    def silent_abort(self, rec: TransRecord) -> None:
        self._set_status(rec, Status.ABORTED, "orphan")
        self._destroy_members(rec)
        self._remove(rec)

    # -- topology change --------------------------------------------------

    def topology_change(self, site: SiteId, old: frozenset, new: frozenset) -> None:
        self.emit(site, "topology", table=set(new))
        self.orphan_sweep_home(site, new)
        self.orphan_sweep_files(site, new)
        self.notify_waiters(site, new)
        self.abort_on_inaccessible_storage(site, new)
        if new - old:
            self.emit(site, "recovery", joined=set(new - old))
            self._resume_commits(site, old, new)

    def orphan_sweep_home(self, site, acc) -> None:
        st = self.sites[site]
        for tid in sorted(st.records):
            rec = st.records.get(tid)
            if rec is not None and any(s.home not in acc for s in tid.superiors()):
                self.silent_abort(rec)
        for pid in sorted(st.procs):
            proc = st.procs[pid]
            if proc.alive and proc.tid is not None and proc.tid.home not in acc:
                self._destroy(proc)

    def orphan_sweep_files(self, site, acc) -> None:
        st = self.sites[site]
        st.locks.sweep_all(acc)
        # a participant that never prepared may abort on its own
        for name in sorted(st.locks.locks):
            tl = st.locks.get(name)
            if tl is not None and tl.committing is not None:
                t = tl.committing
                if t.home not in acc and t not in st.prepared:
                    st.locks.abort(name, t)

    def notify_waiters(self, site, acc) -> None:
        st = self.sites[site]
        for tid in sorted(st.records):
            rec = st.records.get(tid)
            if rec is None or rec.status is not Status.UNDEFINED:
                continue
            if any(c.home not in acc for c in rec.committing):
                self.abort_transaction(rec, "partitioned from committing child")
        for pid in sorted(st.procs):
            proc = st.procs[pid]
            if proc.alive:
                for child in sorted(proc.unreaped):
                    if child.site not in acc:
                        self._child_exited(proc, child, "fail")
            if not proc.alive or not proc.waiting:
                continue
            w = proc.waiting
            if w[0] == "relcall" and w[1].home not in acc:
                if proc.tid is None:
                    code = CompletionCode.UNKNOWN_OUTCOME if w[1].is_top else CompletionCode.ABORTED
                    self._complete_call(site, pid, w[1], code)
                elif chain_accessible(proc.tid, acc):
                    self._complete_call(site, pid, w[1], CompletionCode.ABORTED)
            elif w[0] == "site" and w[1] not in acc:
                self._fail(proc, f"site {w[1]} inaccessible")
        self._prune_awaiting(site, acc)

    def _prune_awaiting(self, site, acc) -> None:
        st = self.sites[site]
        for tid in sorted(st.records):
            rec = st.records.get(tid)
            if rec is None:
                continue
            if rec.phase == "abort-children":
                lost = {c for c in rec.awaiting if c.home not in acc}
                if lost:
                    rec.awaiting -= lost
                    if not rec.awaiting:
                        self._abort_tss(rec)
            elif rec.phase == "abort-tss":
                if rec.awaiting - acc:
                    rec.awaiting &= acc
                    if not rec.awaiting:
                        self._abort_done(rec)
            elif rec.phase == "tsscommit":
                if rec.awaiting - acc:
                    rec.awaiting &= acc
                    rec.ok = False
                    if not rec.awaiting:
                        self._tsscommit_done(rec)
            elif rec.phase == "prepare":
                if rec.awaiting - acc:
                    self.abort_transaction(rec, "participant lost before commit point")

    def abort_on_inaccessible_storage(self, site, acc) -> None:
        st = self.sites[site]
        for tid in sorted(st.records):
            rec = st.records.get(tid)
            if rec is None or rec.status is not Status.UNDEFINED:
                continue
            if rec.phase not in ("active", "req"):
                continue
            if any(s not in acc for s in rec.tss_sites()):
                self.abort_transaction(rec, "participant TSS inaccessible")
            elif any(p.site not in acc for p in rec.members):
                self.abort_transaction(rec, "remote member inaccessible")

    def _resume_commits(self, site, old, new) -> None:
        st = self.sites[site]
        joined = new - old
        for tid in sorted(st.records):
            rec = st.records[tid]
            if rec.phase == "phase2":
                for p in sorted(rec.awaiting & joined):
                    self.send(site, p, "COMMIT", tid=tid, files=rec.files_at(p, True))
        for tid in sorted(st.prepared):
            coord = st.prepared[tid][0]
            if coord in joined:
                self.send(site, coord, "VOTE", tid=tid, ok=True)

    # -- inspection -----------------------------------------------------------

    def live_records(self) -> list[TransRecord]:
        return list(self.all_records())

    def lock_table(self, site) -> LockTable:
        return self.sites[site].locks


class ProtocolError(Exception):
    pass


def relcall(engine: Engine, caller: Process, program: str, site: SiteId) -> None:
    """Issue a relcall on behalf of caller; the completion code lands in regs["_"]."""
    if caller.sub is not None or not caller.alive or caller.state != "ready":
        raise ProtocolError(f"{caller.pid} already waits on a transaction")
    engine._do_relcall(caller, Action("relcall", (program, site), "_"))


def fork_member(engine: Engine, parent_proc: Process, program: str, site: SiteId) -> None:
    engine._do_fork(parent_proc, Action("fork", (program, site)))


def exit_member(engine: Engine, proc: Process, success: bool) -> None:
    engine._exit(proc, success)


def subtransaction_commit(engine: Engine, rec: TransRecord) -> None:
    engine.subtransaction_commit(rec)


def toplevel_commit(engine: Engine, rec: TransRecord) -> None:
    engine.toplevel_commit(rec)


def two_phase_commit(engine: Engine, rec: TransRecord) -> None:
    engine.two_phase_commit(rec)


def abort_transaction(engine: Engine, rec: TransRecord, why: str = "requested") -> None:
    engine.abort_transaction(rec, why)


def orphan_sweep_home(engine: Engine, site: SiteId, accessible) -> None:
    engine.orphan_sweep_home(site, frozenset(accessible))


def notify_waiters(engine: Engine, site: SiteId, accessible) -> None:
    engine.notify_waiters(site, frozenset(accessible))


def abort_on_inaccessible_storage(engine: Engine, site: SiteId, accessible) -> None:
    engine.abort_on_inaccessible_storage(site, frozenset(accessible))
