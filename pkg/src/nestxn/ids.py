"""Site, process and transaction identifiers.

A transaction id carries its whole invocation path, root first, so the home
site and every superior can be read off the value without a lookup.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

SiteId = int


@dataclass(frozen=True, order=True)
class Pid:
    site: SiteId
    serial: int

    def __str__(self) -> str:
        return f"p{self.site}.{self.serial}"


@dataclass(frozen=True, order=True)
class Tid:
    path: tuple[tuple[SiteId, int], ...]

    def __post_init__(self):
        if not self.path:
            raise ValueError("empty transaction path")

    @classmethod
    def top(cls, site: SiteId, serial: int) -> "Tid":
        return cls(((site, serial),))

    @classmethod
    def parse(cls, text: str) -> "Tid":
        elems = []
        for part in text.strip().split("/"):
            site, _, serial = part.partition(".")
            if not site.startswith("s") or not serial.startswith("t"):
                raise ValueError(f"bad transaction id {text!r}")
            elems.append((int(site[1:]), int(serial[1:])))
        return cls(tuple(elems))

    def child(self, site: SiteId, serial: int) -> "Tid":
        return Tid(self.path + ((site, serial),))

    @property
    def home(self) -> SiteId:
        return self.path[-1][0]

    @property
    def parent(self) -> Optional["Tid"]:
        if len(self.path) == 1:
            return None
        return Tid(self.path[:-1])

    @property
    def is_top(self) -> bool:
        return len(self.path) == 1

    @property
    def depth(self) -> int:
        return len(self.path)

    @property
    def root(self) -> "Tid":
        return Tid(self.path[:1])

    def ancestors(self) -> Iterator["Tid"]:
        """Yield self, then parent, grandparent... up to the root."""
        for n in range(len(self.path), 0, -1):
            yield Tid(self.path[:n])

    def superiors(self) -> Iterator["Tid"]:
        for n in range(len(self.path) - 1, 0, -1):
            yield Tid(self.path[:n])

    def __str__(self) -> str:
        return "/".join(f"s{site}.t{serial}" for site, serial in self.path)


def is_ancestor(a: Tid, b: Tid) -> bool:
    """True iff a is b or one of b's superiors."""
    n = len(a.path)
    return n <= len(b.path) and b.path[:n] == a.path


def is_superior(a: Tid, b: Tid) -> bool:
    return len(a.path) < len(b.path) and b.path[: len(a.path)] == a.path


def home_site(t: Tid) -> SiteId:
    return t.home


def parent(t: Tid) -> Optional[Tid]:
    return t.parent


def chain_accessible(t: Tid, accessible) -> bool:
    """True iff the home site of t and of every superior is in accessible."""
    return all(site in accessible for site, _ in t.path)
