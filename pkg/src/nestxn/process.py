"""Member processes and the scripted actions they execute."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .ids import Pid, SiteId, Tid

OPS = ("relcall", "fork", "wait", "open", "read", "write", "update",
       "close", "exit", "sleep")

SUCCESS = ("ok", "COMMITTED")


@dataclass(frozen=True)
class Action:
    """One script step.

    args by op:
      relcall/fork: (program, site)    open: (file, mode)
      read: (file, page)               write/update: (file, page, text)
      close: (file,)                   sleep: (steps,)
      wait: ()                         exit: ("ok",) | ("fail",) | ("all", reg, ...)
    """

    op: str
    args: tuple = ()
    dest: Optional[str] = None
    line: int = 0

    def __str__(self):
        s = " ".join([self.op, *(str(a) for a in self.args)])
        if self.dest:
            s += f" -> {self.dest}"
        return s


@dataclass
class Process:
    pid: Pid
    label: str
    script: tuple
    tid: Optional[Tid] = None
    top: bool = False
    parent_pid: Optional[Pid] = None
    pc: int = 0
    regs: dict = field(default_factory=dict)
    state: str = "ready"  # ready | blocked | halted | destroyed
    waiting: Optional[tuple] = None
    sub: Optional[Tid] = None
    open_files: dict = field(default_factory=dict)  # file -> (tss site, mode)
    children: list = field(default_factory=list)
    exited: deque = field(default_factory=deque)
    unreaped: set = field(default_factory=set)
    attempts: int = 0
    scratch: dict = field(default_factory=dict)
    exit_code: Optional[str] = None

    @property
    def site(self) -> SiteId:
        return self.pid.site

    @property
    def alive(self) -> bool:
        return self.state in ("ready", "blocked")

    def current(self) -> Optional[Action]:
        if self.pc < len(self.script):
            return self.script[self.pc]
        return None


def exit_success(action: Action, regs: dict) -> bool:
    kind = action.args[0] if action.args else "ok"
    if kind == "ok":
        return True
    if kind == "fail":
        return False
    if kind == "all":
        return all(regs.get(r) in SUCCESS for r in action.args[1:])
    raise ValueError(f"bad exit {action}")
