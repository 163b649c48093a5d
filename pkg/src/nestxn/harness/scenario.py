"""Line-oriented scenario files.

A scenario declares sites, files and programs, the root processes that start
the run, a fault schedule, and expectations checked at the end (or at a
chosen step). One directive per line; ``#`` starts a comment; tokens are
split shell-style so page contents may be quoted.

    sites 1 2 3
    file F on 2 pages a b
    program child
      open F write
      write F 0 x
      close F
      exit ok
    end
    process main @1
      relcall child @2 -> r
      exit all r
    end
    at 40 partition 1 | 2,3
    at quiet merge
    expect reg main r COMMITTED
    expect durable F@2 = x b
"""
from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..process import Action


class ScenarioError(Exception):
    def __init__(self, msg, line: int = 0, source: str = "<scenario>"):
        super().__init__(f"{source}:{line}: {msg}" if line else msg)
        self.line = line


@dataclass(frozen=True)
class FileDecl:
    name: str
    replicas: tuple
    pages: tuple


@dataclass(frozen=True)
class RootDecl:
    label: str
    site: int
    script: tuple


@dataclass(frozen=True)
class Expect:
    kind: str
    args: tuple
    line: int = 0

    def __str__(self):
        return " ".join([self.kind, *map(str, self.args)])


@dataclass(frozen=True)
class Fault:
    """A scheduled topology change or mid-run check.

    when is ("step", n), ("before", kind, k), ("after", kind, k) or ("quiet",).
    action is ("partition", groups), ("merge",) or ("check", Expect).
    """

    when: tuple
    action: tuple
    line: int = 0


@dataclass
class Scenario:
    name: str = "scenario"
    sites: tuple = ()
    page_size: int = 1024
    retry_limit: int = 3
    retry_delay: int = 2
    commit_mode: str = "2pc"
    files: list = field(default_factory=list)
    programs: dict = field(default_factory=dict)
    roots: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    expects: list = field(default_factory=list)


ACTION_ARITY = {
    "relcall": 2, "fork": 2, "wait": 0, "open": 2, "read": 2, "write": 3,
    "update": 3, "close": 1, "sleep": 1,
}


def _site(tok: str, ln: int) -> int:
    if not tok.startswith("@"):
        raise ScenarioError(f"expected @SITE, got {tok!r}", ln)
    try:
        return int(tok[1:])
    except ValueError:
        raise ScenarioError(f"bad site {tok!r}", ln) from None


def parse_action(toks: list[str], ln: int) -> Action:
    op, rest = toks[0], toks[1:]
    dest = None
    if "->" in rest:
        i = rest.index("->")
        if i != len(rest) - 2:
            raise ScenarioError("'->' must be followed by one register name", ln)
        dest = rest[-1]
        rest = rest[:i]
    if op == "exit":
        if not rest:
            rest = ["ok"]
        if rest[0] not in ("ok", "fail", "all"):
            raise ScenarioError(f"bad exit {rest[0]!r}", ln)
        return Action("exit", tuple(rest), None, ln)
    if op not in ACTION_ARITY:
        raise ScenarioError(f"unknown action {op!r}", ln)
    if len(rest) != ACTION_ARITY[op]:
        raise ScenarioError(f"{op} takes {ACTION_ARITY[op]} argument(s)", ln)
    if op in ("relcall", "fork"):
        args = (rest[0], _site(rest[1], ln))
    elif op == "open":
        mode = rest[1].upper()
        if mode not in ("READ", "WRITE"):
            raise ScenarioError(f"bad mode {rest[1]!r}", ln)
        args = (rest[0], mode)
    elif op in ("read", "write", "update"):
        try:
            idx = int(rest[1])
        except ValueError:
            raise ScenarioError(f"bad page index {rest[1]!r}", ln) from None
        args = (rest[0], idx, *rest[2:])
    elif op == "sleep":
        args = (int(rest[0]),)
    else:
        args = tuple(rest)
    if dest and op not in ("relcall", "wait", "read", "write", "update"):
        raise ScenarioError(f"{op} has no result", ln)
    return Action(op, args, dest, ln)


def _groups(toks: list[str], ln: int) -> tuple:
    text = " ".join(toks)
    groups = []
    for part in text.split("|"):
        sites = [s for s in part.replace(",", " ").split()]
        if not sites:
            raise ScenarioError("empty partition group", ln)
        groups.append(tuple(int(s) for s in sites))
    return tuple(groups)


def _copy_ref(tok: str, ln: int) -> tuple:
    name, at, site = tok.partition("@")
    if not at:
        raise ScenarioError(f"expected FILE@SITE, got {tok!r}", ln)
    return name, int(site)


def parse_expect(toks: list[str], ln: int) -> Expect:
    if not toks:
        raise ScenarioError("empty expect", ln)
    kind, rest = toks[0], toks[1:]
    if kind == "reg":
        if len(rest) != 3:
            raise ScenarioError("expect reg PROC REG VALUE", ln)
        return Expect(kind, tuple(rest), ln)
    if kind == "exit":
        if len(rest) != 2:
            raise ScenarioError("expect exit PROC ok|fail", ln)
        return Expect(kind, tuple(rest), ln)
    if kind in ("durable", "current", "retainers", "readretainers"):
        if len(rest) < 2 or rest[1] != "=":
            raise ScenarioError(f"expect {kind} FILE@SITE = ...", ln)
        return Expect(kind, (_copy_ref(rest[0], ln), tuple(rest[2:])), ln)
    if kind == "nolock":
        if len(rest) != 1:
            raise ScenarioError("expect nolock FILE@SITE", ln)
        return Expect(kind, (_copy_ref(rest[0], ln),), ln)
    if kind in ("norecords", "nolocks"):
        return Expect(kind, (), ln)
    if kind == "status":
        if len(rest) != 2:
            raise ScenarioError("expect status TID STATUS", ln)
        return Expect(kind, tuple(rest), ln)
    if kind == "counter":
        if len(rest) != 3 or rest[1] not in ("==", "<=", ">="):
            raise ScenarioError("expect counter NAME ==|<=|>= N", ln)
        return Expect(kind, (rest[0], rest[1], int(rest[2])), ln)
    raise ScenarioError(f"unknown expectation {kind!r}", ln)


def _when(toks: list[str], ln: int) -> tuple[tuple, list[str]]:
    head = toks[0]
    if head == "quiet":
        return ("quiet",), toks[1:]
    if head in ("before", "after"):
        kind, _, k = toks[1].partition(":")
        return (head, kind, int(k or 1)), toks[2:]
    try:
        return ("step", int(head)), toks[1:]
    except ValueError:
        raise ScenarioError(f"bad fault time {head!r}", ln) from None


def parse(text: str, name: str = "scenario") -> Scenario:
    sc = Scenario(name=name)
    block = None  # (kind, name, site, actions, start line)
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            toks = shlex.split(line)
        except ValueError as e:
            raise ScenarioError(str(e), ln, name) from None
        head = toks[0]
        try:
            if block is not None:
                if head == "end":
                    kind, bname, bsite, actions, _ = block
                    if kind == "program":
                        sc.programs[bname] = tuple(actions)
                    else:
                        sc.roots.append(RootDecl(bname, bsite, tuple(actions)))
                    block = None
                else:
                    block[3].append(parse_action(toks, ln))
                continue
            if head == "sites":
                sc.sites = tuple(int(t) for t in toks[1:])
            elif head == "pagesize":
                sc.page_size = int(toks[1])
            elif head == "retry":
                sc.retry_limit = int(toks[1])
                if len(toks) > 2:
                    sc.retry_delay = int(toks[2])
            elif head == "commit":
                if toks[1] not in ("2pc", "simple"):
                    raise ScenarioError(f"bad commit mode {toks[1]!r}", ln)
                sc.commit_mode = toks[1]
            elif head == "file":
                if len(toks) < 4 or toks[2] != "on":
                    raise ScenarioError("file NAME on S,S [pages ...]", ln)
                replicas = tuple(int(s) for s in toks[3].split(","))
                pages = tuple(toks[5:]) if len(toks) > 4 and toks[4] == "pages" else ()
                sc.files.append(FileDecl(toks[1], replicas, pages))
            elif head == "program":
                if len(toks) != 2:
                    raise ScenarioError("program NAME", ln)
                if toks[1] in sc.programs:
                    raise ScenarioError(f"program {toks[1]!r} defined twice", ln)
                block = ("program", toks[1], None, [], ln)
            elif head == "process":
                if len(toks) != 3:
                    raise ScenarioError("process LABEL @SITE", ln)
                block = ("process", toks[1], _site(toks[2], ln), [], ln)
            elif head == "at":
                when, rest = _when(toks[1:], ln)
                if not rest:
                    raise ScenarioError("missing fault action", ln)
                if rest[0] == "partition":
                    action = ("partition", _groups(rest[1:], ln))
                elif rest[0] == "merge":
                    action = ("merge",)
                elif rest[0] == "check":
                    action = ("check", parse_expect(rest[1:], ln))
                else:
                    raise ScenarioError(f"unknown fault {rest[0]!r}", ln)
                sc.faults.append(Fault(when, action, ln))
            elif head == "expect":
                sc.expects.append(parse_expect(toks[1:], ln))
            else:
                raise ScenarioError(f"unknown directive {head!r}", ln)
        except ScenarioError as e:
            if not e.line:
                raise ScenarioError(str(e), ln, name) from None
            raise ScenarioError(str(e).split(": ", 1)[-1], ln, name) from None
        except (ValueError, IndexError) as e:
            raise ScenarioError(f"malformed line: {e}", ln, name) from None
    if block is not None:
        raise ScenarioError(f"{block[0]} {block[1]!r} never ended", block[4], name)
    validate(sc)
    return sc


def validate(sc: Scenario) -> None:
    sites = set(sc.sites)
    if sc.roots and not sites:
        raise ScenarioError("no sites declared")
    names = set()
    for f in sc.files:
        if f.name in names:
            raise ScenarioError(f"file {f.name!r} declared twice")
        names.add(f.name)
        if not set(f.replicas) <= sites:
            raise ScenarioError(f"file {f.name!r} on undeclared site")
    labels = set()
    for r in sc.roots:
        if r.label in labels:
            raise ScenarioError(f"process {r.label!r} declared twice")
        labels.add(r.label)
    scripts = [(r.label, r.script) for r in sc.roots] + list(sc.programs.items())
    for who, script in scripts:
        for a in script:
            if a.op in ("relcall", "fork"):
                if a.args[0] not in sc.programs:
                    raise ScenarioError(f"{who}: unknown program {a.args[0]!r}", a.line)
                if a.args[1] not in sites:
                    raise ScenarioError(f"{who}: unknown site {a.args[1]}", a.line)
            if a.op in ("open", "read", "write", "update", "close") and a.args[0] not in names:
                raise ScenarioError(f"{who}: unknown file {a.args[0]!r}", a.line)
    for r in sc.roots:
        if r.site not in sites:
            raise ScenarioError(f"process {r.label!r} on undeclared site {r.site}")
    last = -1
    for f in sc.faults:
        if f.when[0] == "step":
            if f.when[1] < last:
                raise ScenarioError("fault steps must not decrease", f.line)
            last = f.when[1]
        if f.action[0] == "partition":
            flat = [s for g in f.action[1] for s in g]
            if sorted(flat) != sorted(sites) or len(flat) != len(set(flat)):
                raise ScenarioError("partition must cover every site exactly once", f.line)


def load(path) -> Scenario:
    p = Path(path)
    return parse(p.read_text(), name=p.name)
