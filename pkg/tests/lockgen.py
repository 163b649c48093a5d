"""Random t-lock states built by driving a LockTable through legal lifecycles."""
import random

from nestxn.filestore import DurableStore, FileSpec
from nestxn.ids import Tid, is_ancestor
from nestxn.tlock import LockMode, LockTable

TSS = 9
FILE = "F"


def random_tree(rng: random.Random, max_tx=5, max_depth=4, sites=(1, 2, 3, 4)):
    root = Tid.top(rng.choice(sites), 1)
    tree = [root]
    serial = 1
    while len(tree) < max_tx:
        parents = [t for t in tree if t.depth < max_depth]
        p = rng.choice(parents)
        serial += 1
        tree.append(p.child(rng.choice(sites), serial))
    return tree


class LockWorld:
    """One file copy, a transaction tree, and a record of everything done to it."""

    def __init__(self, rng: random.Random, max_tx=5, max_depth=4, trees=1):
        self.rng = rng
        self.store = DurableStore(page_size=64)
        self.store.add_file(FileSpec(FILE, (TSS,), ("p0", "p1")))
        self.table = LockTable(TSS, self.store)
        self.tree = []
        for i in range(trees):
            t = random_tree(rng, max_tx, max_depth)
            # distinct roots per tree
            self.tree += [Tid(((t[0].path[0][0], 10 * i + 1),) + x.path[1:]) for x in t]
        self.status = {t: "active" for t in self.tree}
        self.writes = []  # (tid, idx, content)
        self.aborted = set()
        self.nwrites = 0

    @property
    def lock(self):
        return self.table.get(FILE)

    def live(self, t) -> bool:
        return all(self.status[a] == "active" for a in t.ancestors())

    def live_tids(self):
        return [t for t in self.tree if self.live(t)]

    def children(self, t):
        return [c for c in self.tree if c.parent == t]

    def can_finish(self, t) -> bool:
        return self.live(t) and all(self.status[c] != "active" for c in self.children(t))

    def step(self) -> None:
        rng = self.rng
        live = self.live_tids()
        if not live:
            return
        t = rng.choice(live)
        r = rng.random()
        tl = self.lock
        if r < 0.35:
            self.table.open(FILE, t, rng.choice([LockMode.READ, LockMode.WRITE]), t.home)
        elif r < 0.55:
            if tl is not None and tl.write_holder is not None and tl.write_holder.tid == t:
                self.nwrites += 1
                idx, content = rng.randint(0, 1), f"w{self.nwrites}"
                assert self.table.access(FILE, t, "write", idx, content).ok
                self.writes.append((t, idx, content))
        elif r < 0.75:
            self.table.close(FILE, t)
        elif r < 0.9:
            if self.can_finish(t) and not t.is_top:
                self.table.close(FILE, t)
                self.table.commit(FILE, t)
                self.status[t] = "committed"
        else:
            self.table.abort(FILE, t)
            for d in self.tree:
                if is_ancestor(t, d) and self.status[d] == "active":
                    self.status[d] = "aborted"
            self.aborted.add(t)

    def run(self, n) -> "LockWorld":
        for _ in range(n):
            self.step()
        return self


def key(table: LockTable):
    return table.state_key()


def check_invariants(tl) -> list[str]:
    """Structural invariants every reachable t-lock must satisfy."""
    if tl is None:
        return []
    bad = []
    if tl.write_holder is not None and tl.read_holders:
        bad.append("read and write holders at once")
    wr = tl.write_retainer_tids()
    for lower, upper in zip(wr, wr[1:]):
        if not (is_ancestor(lower, upper) and lower != upper):
            bad.append(f"stack order {lower} below {upper}")
    if len(set(wr)) != len(wr) or len(set(tl.read_retainers)) != len(tl.read_retainers):
        bad.append("duplicate retainer")
    if wr:
        top = wr[-1]
        for h in tl.holders():
            if not is_ancestor(top, h):
                bad.append(f"{h} holds while {top}, not its ancestor, retains write")
    return bad


def grant_allowed(tl, t, mode) -> bool:
    """Locking rules stated directly: who may hold given who holds and retains."""
    if tl is None:
        return True
    if tl.committing is not None:
        return False
    write_holder = tl.write_holder.tid if tl.write_holder else None
    if write_holder is not None and write_holder != t:
        return False
    if any(not is_ancestor(r, t) for r in tl.write_retainer_tids()):
        return False
    if mode is LockMode.WRITE:
        if any(h != t for h in tl.read_holders):
            return False
        if any(not is_ancestor(r, t) for r in tl.read_retainers):
            return False
    return True
