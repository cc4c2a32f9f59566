import hashlib

import pytest

from saf import frames as fr
from saf.fabric import (
    NS, AlreadyAttached, Fabric, LinkParams, NotAttached, PortOccupied, TopologyError, UnknownSwitch,
    path_latency_s,
)
from saf.frames import BROADCAST, HostProbe, MacAddress, PrChunk
from saf.models import derive_sim_defaults
from saf.scenario import agent_mac, make_agent, build_testbed
from saf.host import ALL

NO_OVERHEAD = LinkParams(per_frame_overhead_s=0.0)


class Probe:
    """Minimal endpoint that records what it receives."""

    def __init__(self, n):
        self.mac = MacAddress(bytes([2, 0xEE, 0, 0, 0, n]))
        self.inbox = []
        self.times = []
        self.link = None
        self.ups = 0

    def on_link_up(self, link):
        self.link = link
        self.ups += 1

    def on_link_down(self):
        self.link = None

    def receive(self, raw):
        self.inbox.append(raw)
        self.times.append(self.link.now())

    def send(self, dst, payload):
        self.link.send(fr.build(dst, self.mac, payload))


def two_switch(params=NO_OVERHEAD, **kw):
    fab = Fabric(params, **kw)
    fab.add_switch("A")
    fab.add_switch("B")
    fab.add_trunk("A", "B")
    return fab


def test_topology_errors():
    fab = two_switch()
    with pytest.raises(TopologyError):
        fab.add_trunk("A", "B")
    with pytest.raises(TopologyError):
        fab.add_trunk("A", "A")
    with pytest.raises(UnknownSwitch):
        fab.attach(Probe(1), "Z")
    p = Probe(1)
    port = fab.attach(p, "A", 3)
    assert fab.location(p) == ("A", 3)
    with pytest.raises(PortOccupied):
        fab.attach(Probe(2), "A", 3)
    with pytest.raises(AlreadyAttached):
        fab.attach(p, "B")
    with pytest.raises(TopologyError):
        fab.attach(Probe(3), "A", 12)
    fab.detach(p)
    with pytest.raises(NotAttached):
        fab.detach(p)
    assert port == 3


def test_switch_runs_out_of_ports():
    fab = Fabric(NO_OVERHEAD)
    fab.add_switch("S", 2)
    fab.attach(Probe(1), "S")
    fab.attach(Probe(2), "S")
    with pytest.raises(PortOccupied):
        fab.attach(Probe(3), "S")


def test_broadcast_reaches_everyone_with_trunk_delay():
    fab = two_switch()
    host = Probe(0)
    near = Probe(1)
    far = Probe(2)
    fab.attach(host, "B")
    fab.attach(near, "B")
    fab.attach(far, "A")
    host.send(BROADCAST, HostProbe(1))
    stats = fab.run_until()
    assert len(near.inbox) == len(far.inbox) == 1 and host.inbox == []
    hop = path_latency_s(NO_OVERHEAD, 1, 60)
    assert near.times[0] == pytest.approx(2 * hop)
    assert far.times[0] - near.times[0] == pytest.approx(hop)
    assert stats.sent == stats.delivered == 2


def test_unknown_unicast_floods_then_learns():
    fab = two_switch()
    a, b, c = Probe(1), Probe(2), Probe(3)
    fab.attach(a, "A")
    fab.attach(b, "B")
    fab.attach(c, "B")
    a.send(b.mac, HostProbe(1))
    fab.run_until()
    assert fab.stats.flooded >= 1 and fab.stats.filtered == 1
    assert len(b.inbox) == 1 and c.inbox == []
    b.send(a.mac, HostProbe(2))
    fab.run_until()
    flooded = fab.stats.flooded
    a.send(b.mac, HostProbe(3))
    fab.run_until()
    assert fab.stats.flooded == flooded
    assert len(b.inbox) == 2


def test_per_link_fifo_order():
    fab = two_switch()
    a, b = Probe(1), Probe(2)
    fab.attach(a, "A")
    fab.attach(b, "B")
    for i in range(50):
        # mix small and large frames so serialization times differ
        payload = PrChunk(0, 1024, bytes(1024)) if i % 2 else HostProbe(i)
        a.send(b.mac, payload)
    fab.run_until()
    seqs = [fr.parse(r)[1] for r in b.inbox]
    assert [s.seq for s in seqs if isinstance(s, HostProbe)] == list(range(0, 50, 2))
    assert b.times == sorted(b.times)


def test_serialization_and_overhead_timing():
    params = LinkParams(bandwidth_bps=1_000_000_000, latency_s=2e-6, per_frame_overhead_s=0.0)
    fab = Fabric(params)
    fab.add_switch("S")
    a, b = Probe(1), Probe(2)
    fab.attach(a, "S", overhead_s=10e-6)
    fab.attach(b, "S")
    for _ in range(3):
        a.send(b.mac, HostProbe(0))
    fab.run_until()
    ser = 60 * 8 / 1e9
    per = 10e-6 + ser
    expected = [(i + 1) * per + 2e-6 + ser + 2e-6 for i in range(3)]
    assert b.times == pytest.approx(expected)


def test_detach_drops_and_counts():
    fab = two_switch()
    a, b = Probe(1), Probe(2)
    fab.attach(a, "A")
    fab.attach(b, "B")
    b.send(a.mac, HostProbe(0))
    fab.run_until()
    fab.detach(b)
    a.send(b.mac, HostProbe(1))
    stats = fab.run_until()
    assert stats.drops.get("no_route") == 1
    assert stats.sent == stats.delivered + stats.dropped


def test_detach_in_flight_counts_as_detached():
    fab = two_switch()
    a, b = Probe(1), Probe(2)
    fab.attach(a, "A")
    fab.attach(b, "B")
    a.send(b.mac, HostProbe(1))
    fab.detach(b)
    stats = fab.run_until()
    assert b.inbox == [] and stats.drops == {"detached": 1}


def test_reattach_other_port_resumes_unicast():
    fab = two_switch()
    a, b = Probe(1), Probe(2)
    fab.attach(a, "A")
    fab.attach(b, "A")
    b.send(a.mac, HostProbe(0))
    fab.run_until()
    fab.detach(b)
    fab.attach(b, "B")
    assert b.ups == 2
    a.send(b.mac, HostProbe(1))
    fab.run_until()
    assert len(b.inbox) == 1


def test_loss_is_seeded_and_accounted():
    def run(seed):
        fab = two_switch(LinkParams(per_frame_overhead_s=0.0), seed=seed)
        a, b = Probe(1), Probe(2)
        fab.attach(a, "A")
        fab.attach(b, "B")
        fab.set_loss(b, 0.2)
        for i in range(500):
            a.send(b.mac, HostProbe(i))
        return fab.run_until(), [fr.parse(r)[1].seq for r in b.inbox]

    s1, got1 = run(7)
    s2, got2 = run(7)
    assert got1 == got2 and s1.to_dict() == s2.to_dict()
    assert 0 < s1.drops["lost"] < 500
    assert s1.sent == s1.delivered + s1.dropped


def test_empty_queue_returns_immediately():
    fab = two_switch()
    stats = fab.run_until()
    assert stats.sim_time == 0.0
    fab.run_until(1.5)
    assert fab.now == 1.5


def test_daemon_timers_do_not_block_quiescence():
    fab = Fabric(NO_OVERHEAD)
    ticks = []
    cancel = fab.every(0.1, lambda: ticks.append(fab.now))
    fab.run_until()
    assert ticks == [] and fab.quiescent()
    fab.run_until(0.35)
    assert ticks == pytest.approx([0.0, 0.1, 0.2, 0.3])
    cancel()
    fab.run_until(1.0)
    assert len(ticks) == 4


def test_run_until_predicate_and_ties():
    fab = Fabric(NO_OVERHEAD)
    order = []
    for i in range(5):
        fab.call_at(100, order.append, i)
    fab.call_at(50, order.append, "first")
    fab.run_until(until=lambda: len(order) == 3)
    assert order == ["first", 0, 1]
    fab.run_until()
    assert order == ["first", 0, 1, 2, 3, 4]


def test_same_seed_same_statistics():
    def run():
        sc = build_testbed(6, seed=3)
        sc.host.discover()
        sc.host.program(ALL, bytes(50_000))
        return sc.fabric.snapshot().to_json()

    assert run() == run()


def test_attach_during_transfer_does_not_disturb_it():
    data = bytes(range(256)) * 80_000  # ~20 MB

    def run(hot_plug):
        fab = two_switch()
        src, dst = Probe(1), Probe(2)
        fab.attach(src, "A")
        fab.attach(dst, "B")
        src.link.stream(fr.build(dst.mac, src.mac, c)
                        for c in (PrChunk(o, len(data), data[o:o + 1024]) for o in range(0, len(data), 1024)))
        if hot_plug:
            fab.schedule(0.005, fab.attach, make_agent(21), "A")
        fab.run_until()
        return hashlib.sha256(b"".join(fr.parse(r)[1].data for r in dst.inbox)).hexdigest(), dst.times[-1]

    assert run(True) == run(False)


def test_broadcast_pr_time_flat_in_device_count():
    # the trunk adds one store-and-forward hop for cards on switch A
    bits = bytes(300_000)
    times = {}
    for n in (1, 20):
        sc = build_testbed(n)
        sc.host.discover()
        t0 = sc.fabric.now
        sc.host.program(ALL, bits)
        times[n] = sc.fabric.now - t0
    hop = path_latency_s(sc.fabric.link_params, 1, 14 + 18 + 1024)
    assert abs(times[20] - times[1]) <= hop + 1e-9


def test_default_overhead_is_derived():
    d = derive_sim_defaults()
    assert LinkParams().per_frame_overhead_s == d.per_frame_overhead_s
    assert LinkParams().serialization_ns(1056) == 845
    assert NS == 10**9


def test_agents_answer_probe_through_fabric():
    sc = build_testbed(20)
    sc.host.discover()
    assert len(sc.host.registry) == 20
    assert set(sc.host.registry.macs()) == {agent_mac(i) for i in range(1, 21)}
    assert sc.fabric.location(sc.agents[0])[0] == "A"
    assert sc.fabric.location(sc.agents[-1])[0] == "B"
