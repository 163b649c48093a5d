"""Page-level file states and the per-site durable store.

FileState values are immutable. A state is a shared base page tuple plus a
small private delta of pages written since that base, so taking a snapshot
is free and a write only copies the delta.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .ids import SiteId

DEFAULT_PAGE_SIZE = 1024

# fold the delta into a fresh base once it grows past this many pages
_COMPACT_AT = 16


class FileStoreError(Exception):
    pass


class NoSuchPage(FileStoreError, IndexError):
    def __init__(self, idx):
        super().__init__(f"no such page: {idx}")
        self.idx = idx


class FileState:
    __slots__ = ("_base", "_delta", "_length", "base_version")

    def __init__(self, pages: Iterable[str] = (), base_version: int = 0):
        self._base = tuple(pages)
        self._delta: Mapping[int, str] = {}
        self._length = len(self._base)
        self.base_version = base_version

    @classmethod
    def _derive(cls, prev: "FileState", delta, length) -> "FileState":
        s = cls.__new__(cls)
        s._base = prev._base
        s._delta = delta
        s._length = length
        s.base_version = prev.base_version
        return s

    def __len__(self) -> int:
        return self._length

    def page(self, idx: int) -> str:
        if not 0 <= idx < self._length:
            raise NoSuchPage(idx)
        if idx in self._delta:
            return self._delta[idx]
        return self._base[idx]

    def pages(self) -> tuple[str, ...]:
        return tuple(self.page(i) for i in range(self._length))

    @property
    def delta_size(self) -> int:
        return len(self._delta)

    def with_page(self, idx: int, content: str) -> "FileState":
        if not 0 <= idx <= self._length:
            raise NoSuchPage(idx)
        delta = dict(self._delta)
        delta[idx] = content
        length = max(self._length, idx + 1)
        if len(delta) >= _COMPACT_AT:
            tmp = FileState._derive(self, delta, length)
            return FileState(tmp.pages(), self.base_version)
        return FileState._derive(self, delta, length)

    def digest(self) -> str:
        h = hashlib.sha1()
        for p in self.pages():
            h.update(p.encode())
            h.update(b"\0")
        return h.hexdigest()[:8]

    def __eq__(self, other):
        if not isinstance(other, FileState):
            return NotImplemented
        return self.pages() == other.pages()

    def __hash__(self):
        return hash(self.pages())

    def __repr__(self):
        return f"FileState({list(self.pages())!r})"


def snapshot(s: FileState) -> FileState:
    # states are immutable, so the descriptor itself is the snapshot
    return s


def read_page(s: FileState, idx: int) -> str:
    return s.page(idx)


def write_page(s: FileState, idx: int, content: str, page_size: Optional[int] = None) -> FileState:
    if page_size is not None and len(content.encode()) > page_size:
        raise FileStoreError(f"page content exceeds {page_size} bytes")
    return s.with_page(idx, content)


@dataclass
class FileSpec:
    name: str
    replicas: tuple[SiteId, ...]
    pages: tuple[str, ...] = ()


@dataclass
class DurableStore:
    """Committed file copies per (file, site), plus each site's commit log."""

    page_size: int = DEFAULT_PAGE_SIZE
    files: dict[str, FileSpec] = field(default_factory=dict)
    copies: dict[tuple[str, SiteId], FileState] = field(default_factory=dict)
    writes: Counter = field(default_factory=Counter)
    logs: dict[SiteId, list] = field(default_factory=dict)

    def add_file(self, spec: FileSpec) -> None:
        for p in spec.pages:
            if len(p.encode()) > self.page_size:
                raise FileStoreError(f"initial page of {spec.name} exceeds page size")
        self.files[spec.name] = spec
        for site in spec.replicas:
            self.copies[(spec.name, site)] = FileState(spec.pages)

    def replicas(self, name: str) -> tuple[SiteId, ...]:
        try:
            return self.files[name].replicas
        except KeyError:
            raise FileStoreError(f"unknown file {name!r}") from None

    def load(self, name: str, site: SiteId) -> FileState:
        try:
            return self.copies[(name, site)]
        except KeyError:
            raise FileStoreError(f"no replica of {name!r} at site {site}") from None

    def apply_committed(self, name: str, site: SiteId, state: FileState) -> int:
        """Install state as the durable copy; returns pages written."""
        old = self.load(name, site)
        n = max(len(old), len(state))
        changed = 0
        for i in range(n):
            a = old.page(i) if i < len(old) else None
            b = state.page(i) if i < len(state) else None
            if a != b:
                changed += 1
        if changed:
            self.copies[(name, site)] = FileState(state.pages(), old.base_version + 1)
        self.writes[site] += changed
        return changed

    def log(self, site: SiteId) -> list:
        return self.logs.setdefault(site, [])

    def state_hash(self) -> str:
        h = hashlib.sha1()
        for key in sorted(self.copies):
            h.update(repr(key).encode())
            h.update(self.copies[key].digest().encode())
        return h.hexdigest()


def apply_committed(store: DurableStore, name: str, site: SiteId, state: FileState) -> int:
    return store.apply_committed(name, site, state)
