"""Seeded random scenario generator and the per-run oracle bundle."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .oracles import check_scenario_serializable, leftovers, orphan_problems
from .runner import Livelock, Runner
from .scenario import parse

MAX_SITES = 3
MAX_FILES = 2
MAX_DEPTH = 3
MAX_OPS = 40
MAX_ROOTS = 4


class _Gen:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.ops = 0
        self.programs: list[tuple[str, list[str]]] = []
        self.serial = 0

    def name(self, prefix):
        self.serial += 1
        return f"{prefix}{self.serial}"

    def spend(self, n=1) -> bool:
        if self.ops + n > MAX_OPS:
            return False
        self.ops += n
        return True

    def program(self, depth: int, sites, files, forked=False) -> str:
        rng = self.rng
        name = self.name("f" if forked else "p")
        body: list[str] = []
        regs: list[str] = []
        forks = 0
        for _ in range(rng.randint(1, 3)):
            roll = rng.random()
            if roll < 0.6:
                f = rng.choice(files)
                mode = rng.choice(["read", "write"])
                n = rng.randint(1, 3)
                if not self.spend(n + 2):
                    break
                body.append(f"open {f} {mode}")
                for k in range(n):
                    page = rng.randint(0, 1)
                    if mode == "read" or rng.random() < 0.3:
                        body.append(f"read {f} {page} -> x{k}")
                    elif rng.random() < 0.5:
                        body.append(f"write {f} {page} {name}w{k}")
                    else:
                        body.append(f"update {f} {page} +{name}{k}")
                body.append(f"close {f}")
            elif roll < 0.85 and depth < MAX_DEPTH:
                if not self.spend():
                    break
                child = self.program(depth + 1, sites, files)
                reg = f"r{len(regs)}"
                regs.append(reg)
                body.append(f"relcall {child} @{rng.choice(sites)} -> {reg}")
            elif not forked and depth <= MAX_DEPTH:
                if not self.spend(2):
                    break
                child = self.program(depth, sites, files, forked=True)
                body.append(f"fork {child} @{rng.choice(sites)}")
                forks += 1
            if rng.random() < 0.2 and self.spend():
                body.append(f"sleep {rng.randint(1, 6)}")
        for _ in range(forks):
            body.append("wait -> w")
        r = rng.random()
        if r < 0.1:
            body.append("exit fail")
        elif r < 0.3 and regs:
            body.append("exit all " + " ".join(regs))
        else:
            body.append("exit ok")
        self.programs.append((name, body))
        return name


def generate(seed: int) -> str:
    """Scenario text for one seed; the same seed always yields the same text."""
    rng = random.Random(seed)
    g = _Gen(rng)
    nsites = rng.randint(2, MAX_SITES)
    sites = list(range(1, nsites + 1))
    files = [f"F{i}" for i in range(1, rng.randint(1, MAX_FILES) + 1)]
    lines = [f"# generated by fuzz seed {seed}", "sites " + " ".join(map(str, sites)),
             "retry 2 3"]
    for f in files:
        lines.append(f"file {f} on {rng.choice(sites)} pages {f}a {f}b")
    roots = []
    for i in range(rng.randint(1, MAX_ROOTS)):
        top = g.program(1, sites, files)
        roots.append((f"u{i}", rng.choice(sites), top, rng.choice(sites), rng.randint(0, 8)))
    for name, body in g.programs:
        lines.append(f"program {name}")
        lines += ["  " + b for b in body]
        lines.append("end")
    for label, site, top, at, delay in roots:
        lines.append(f"process {label} @{site}")
        if delay:
            lines.append(f"  sleep {delay}")
        lines.append(f"  relcall {top} @{at} -> r")
        lines.append("  exit all r")
        lines.append("end")
    if rng.random() < 0.7 and nsites > 1:
        cut = rng.randint(1, nsites - 1)
        shuffled = sites[:]
        rng.shuffle(shuffled)
        a, b = sorted(shuffled[:cut]), sorted(shuffled[cut:])
        split_at = rng.randint(5, 120)
        merge_at = split_at + rng.randint(1, 80)
        lines.append(f"at {split_at} partition {','.join(map(str, a))} | {','.join(map(str, b))}")
        lines.append(f"at {merge_at} merge")
    return "\n".join(lines) + "\n"


@dataclass
class FuzzOutcome:
    seed: int
    problems: list = field(default_factory=list)
    order: tuple = ()
    committed: int = 0

    @property
    def ok(self) -> bool:
        return not self.problems


def check_seed(seed: int, step_limit: int = 50_000) -> FuzzOutcome:
    text = generate(seed)
    out = FuzzOutcome(seed)
    runner = Runner(parse(text, name=f"fuzz-{seed}"), step_limit=step_limit)
    try:
        result = runner.run()
    except Livelock as e:
        out.problems.append(str(e))
        return out
    out.problems += result.early_writes
    out.problems += orphan_problems(result.engine)
    out.problems += leftovers(result.engine)
    ser = check_scenario_serializable(result)
    if not ser.ok:
        out.problems.append(ser.reason)
    else:
        out.order = tuple(str(t) for t in ser.order)
        out.committed = len(ser.roots)
    return out


def fuzz(seed: int, count: int):
    for s in range(seed, seed + count):
        yield check_seed(s)
