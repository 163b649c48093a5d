import itertools

import pytest

from nestxn.ids import Pid, Tid, chain_accessible, home_site, is_ancestor, is_superior, parent

T = Tid.parse


def test_text_round_trip():
    t = T("s1.t1/s2.t1")
    assert t.path == ((1, 1), (2, 1))
    assert str(t) == "s1.t1/s2.t1"
    assert str(Pid(3, 7)) == "p3.7"


@pytest.mark.parametrize("bad", ["", "1.1", "s1", "s1.x1", "s1.t1//s2.t1"])
def test_parse_rejects_garbage(bad):
    with pytest.raises(ValueError):
        T(bad)


@pytest.mark.parametrize("a,b,want", [
    ("s1.t1", "s1.t1", True),
    ("s1.t1", "s1.t1/s2.t1", True),
    ("s1.t1/s2.t1", "s1.t1/s3.t1", False),
    ("s1.t1/s2.t1", "s1.t1", False),
    ("s1.t1", "s1.t2/s2.t1", False),
])
def test_is_ancestor(a, b, want):
    assert is_ancestor(T(a), T(b)) is want


@pytest.mark.parametrize("t,home", [("s1.t1", 1), ("s1.t1/s2.t1", 2), ("s1.t1/s2.t1/s2.t2", 2)])
def test_home_site(t, home):
    assert home_site(T(t)) == home


@pytest.mark.parametrize("t,want", [
    ("s1.t1/s2.t1", "s1.t1"),
    ("s1.t1", None),
    ("s1.t1/s2.t1/s3.t4", "s1.t1/s2.t1"),
])
def test_parent(t, want):
    got = parent(T(t))
    assert (None if got is None else str(got)) == want


def _tree():
    root = Tid.top(1, 1)
    out = [root]
    for a in (2, 3):
        c = root.child(a, 1)
        out.append(c)
        for b in (1, 2):
            out.append(c.child(b, 5))
    return out


def test_ancestry_is_a_partial_order():
    ts = _tree()
    for a in ts:
        assert is_ancestor(a, a)
        assert not is_superior(a, a)
    for a, b in itertools.product(ts, ts):
        if is_ancestor(a, b) and is_ancestor(b, a):
            assert a == b
        assert is_superior(a, b) == (is_ancestor(a, b) and a != b)
    for a, b, c in itertools.product(ts, ts, ts):
        if is_ancestor(a, b) and is_ancestor(b, c):
            assert is_ancestor(a, c)


def test_superiors_are_proper_prefixes():
    t = T("s1.t1/s2.t3/s3.t1")
    assert [str(s) for s in t.superiors()] == ["s1.t1/s2.t3", "s1.t1"]
    assert [str(s) for s in t.ancestors()][0] == str(t)
    assert t.root == T("s1.t1")


def test_chain_accessible():
    t = T("s1.t1/s2.t1/s3.t1")
    assert chain_accessible(t, {1, 2, 3})
    assert not chain_accessible(t, {1, 3})
