import pytest

from nestxn.net import Network, TopologyError


def make(sites=(1, 2, 3)):
    net = Network(sites)
    got = []
    net.deliver = lambda env: got.append((env.src, env.dst, env.msg.kind, env.msg.fields.get("n")))
    return net, got


def drain(net):
    while net.step() is not None:
        pass


def test_local_send_is_a_local_call_not_a_message():
    net, got = make()
    net.send(1, 1, "PING")
    assert net.metrics.summary() == {"remote_messages": 0, "local_calls": 1, "dropped": 0}
    drain(net)
    assert got == [(1, 1, "PING", None)]


def test_cross_partition_send_is_dropped_and_counted():
    net, got = make()
    net.repartition([{1}, {2, 3}])
    net.send(1, 2, "PING")
    drain(net)
    assert got == [] and net.metrics.dropped["PING"] == 1


def test_fifo_per_pair():
    net, got = make()
    for n in range(5):
        net.send(1, 2, "M", n=n)
    drain(net)
    assert [g[3] for g in got] == list(range(5))


def test_in_flight_messages_dropped_on_split():
    net, got = make()
    net.send(1, 2, "A")
    net.send(2, 3, "B")
    net.repartition([{1}, {2, 3}])
    drain(net)
    assert got == [(2, 3, "B", None)]
    assert net.metrics.dropped["A"] == 1


def test_order_is_stable_between_senders():
    runs = []
    for _ in range(2):
        net, got = make()
        net.send(3, 1, "X")
        net.send(2, 1, "Y")
        net.send(1, 3, "Z")
        drain(net)
        runs.append(got)
    assert runs[0] == runs[1]
    assert [g[0] for g in runs[0]] == [1, 2, 3]


def test_empty_network_is_quiescent():
    net, _ = make()
    assert net.quiescent() and net.step() is None


def test_topology_procedures_run_only_where_tables_change():
    net, _ = make()
    calls = []
    net.on_topology = lambda s, old, new: calls.append((s, sorted(new)))
    assert net.repartition([{1}, {2, 3}]) == [1, 2, 3]
    assert calls == [(1, [1]), (2, [2, 3]), (3, [2, 3])]
    calls.clear()
    assert net.repartition([{1}, {3, 2}]) == []
    assert calls == []
    net.repartition([{1, 2, 3}])
    assert net.accessible(1) == {1, 2, 3}


@pytest.mark.parametrize("groups", [[{1}, {1, 2, 3}], [{1}, {2}], [{1, 2, 3}, set()]])
def test_bad_partitions_rejected(groups):
    net, _ = make()
    with pytest.raises(TopologyError):
        net.repartition(groups)


def test_timers_fire_in_due_order():
    net, got = make()
    net.timer(1, 5, "LATE")
    net.timer(1, 1, "EARLY")
    drain(net)
    assert [g[2] for g in got] == ["EARLY", "LATE"]
    assert net.now == 5
