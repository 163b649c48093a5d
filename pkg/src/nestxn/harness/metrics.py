"""Countable stand-ins for the commit cost comparison: messages and page writes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .runner import Result


@dataclass
class MetricsReport:
    base_commit_messages: int
    txn_commit_messages: int
    base_durable_writes: int
    txn_durable_writes: int

    @staticmethod
    def _ratio(a: int, b: int) -> Optional[float]:
        return None if b == 0 else a / b

    @property
    def message_ratio(self) -> Optional[float]:
        return self._ratio(self.txn_commit_messages, self.base_commit_messages)

    @property
    def write_ratio(self) -> Optional[float]:
        return self._ratio(self.txn_durable_writes, self.base_durable_writes)

    def lines(self) -> list[str]:
        def fmt(r):
            return "undefined" if r is None else f"{r:.3f}"
        return [
            f"commit-phase remote messages: base={self.base_commit_messages} "
            f"txn={self.txn_commit_messages} ratio={fmt(self.message_ratio)}",
            f"durable page writes: base={self.base_durable_writes} "
            f"txn={self.txn_durable_writes} ratio={fmt(self.write_ratio)}",
        ]


def commit_messages(result: Result) -> int:
    return result.metrics.remote_by_phase.get("commit", 0)


def compare_metrics(base: Result, txn: Result) -> MetricsReport:
    return MetricsReport(
        commit_messages(base), commit_messages(txn),
        sum(base.engine.store.writes.values()), sum(txn.engine.store.writes.values()),
    )


def remote_write_scenario(n: int, commit_mode: str = "2pc", nested: bool = False,
                          finish: bool = True) -> str:
    """A transaction at site 1 updating page 1 of n two-page files, each on its own remote site.

    With nested=True the updates happen inside a subtransaction; with
    finish=False the top-level process sleeps forever-ish after it, so the
    run can be inspected before any top-level commit.
    """
    sites = list(range(1, n + 2))
    lines = ["sites " + " ".join(map(str, sites)), f"commit {commit_mode}"]
    for i in range(n):
        lines.append(f"file G{i} on {i + 2} pages p0 p1")
    body = []
    for i in range(n):
        body += [f"open G{i} write", f"write G{i} 1 new{i}", f"close G{i}"]
    if nested:
        lines += ["program work", *body, "exit ok", "end"]
        top = ["relcall work @1 -> c"]
        if not finish:
            top.append("sleep 100000")
        lines += ["program top", *top, "exit all c", "end"]
    else:
        lines += ["program top", *body, "exit ok", "end"]
    lines += ["process user @1", "relcall top @1 -> r", "exit all r", "end"]
    return "\n".join(lines) + "\n"
