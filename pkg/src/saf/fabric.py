"""Discrete-event model of a small switched Ethernet.

Switches learn source MACs, flood broadcasts and unknown unicasts, and
forward everything store-and-forward. Each link direction is a FIFO server:
a frame leaving a port starts when both the frame and the port are ready,
occupies the port for its serialization time and then spends ``latency`` in
flight. The transmitting endpoint additionally pays ``per_frame_overhead``
before each frame (host packet-building cost).

The whole route of a frame is resolved when it is sent, reserving port time
along the way in send order, and one delivery event per receiving endpoint
is queued. Switch buffers are unbounded. Time is kept in integer
nanoseconds and ties are broken by insertion order, so a run is fully
determined by the scenario and the loss seed.

Accounting is per intended recipient: a broadcast counts once for every
other attached endpoint, a unicast once for the owner of its destination
MAC. ``delivered + dropped == sent`` always holds once the queue is drained.
Copies of a flooded unicast that reach other endpoints are discarded by
their NIC filter and only show up in ``filtered``.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol

from . import frames as fr
from .models import derive_sim_defaults

NS = 1_000_000_000

# Ethernet programming time spread over every chunk frame of the reference
# bitstream, less each frame's serialization time at 10 Gb/s.
DEFAULT_HOST_OVERHEAD_S = derive_sim_defaults().per_frame_overhead_s


class FabricError(Exception):
    pass


class PortOccupied(FabricError):
    pass


class UnknownSwitch(FabricError):
    pass


class NotAttached(FabricError):
    pass


class AlreadyAttached(FabricError):
    pass


class TopologyError(FabricError):
    pass


@dataclass(frozen=True)
class LinkParams:
    bandwidth_bps: int = 10_000_000_000
    latency_s: float = 1e-6
    per_frame_overhead_s: float = DEFAULT_HOST_OVERHEAD_S
    loss: float = 0.0

    def serialization_ns(self, nbytes: int) -> int:
        bits = nbytes * 8 * NS
        return -(-bits // self.bandwidth_bps)

    @property
    def latency_ns(self) -> int:
        return round(self.latency_s * NS)

    def overhead_ns(self) -> int:
        return round(self.per_frame_overhead_s * NS)


class Endpoint(Protocol):
    mac: fr.MacAddress

    def receive(self, raw: bytes) -> None: ...

    def on_link_up(self, link) -> None: ...

    def on_link_down(self) -> None: ...


@dataclass
class FabricStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    sim_time: float = 0.0
    drops: dict = field(default_factory=dict)
    flooded: int = 0
    filtered: int = 0
    frames: int = 0

    def to_dict(self) -> dict:
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "sim_time": self.sim_time,
            "drops": dict(sorted(self.drops.items())),
            "flooded": self.flooded,
            "filtered": self.filtered,
            "frames": self.frames,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class _Attachment:
    __slots__ = ("endpoint", "switch", "port", "params", "overhead_ns", "epoch", "busy_ns")

    def __init__(self, endpoint, switch, port, params, overhead_ns, epoch):
        self.endpoint = endpoint
        self.switch = switch
        self.port = port
        self.params = params
        self.overhead_ns = overhead_ns
        self.epoch = epoch
        self.busy_ns = 0


class _Trunk:
    __slots__ = ("switch", "port", "peer", "peer_port", "params")

    def __init__(self, switch, port, peer, peer_port, params):
        self.switch = switch
        self.port = port
        self.peer = peer
        self.peer_port = peer_port
        self.params = params


class Switch:
    def __init__(self, switch_id: str, port_count: int):
        self.id = switch_id
        self.port_count = port_count
        self.ports: dict[int, object] = {}
        self.busy_ns: dict[int, int] = {}
        self.mac_table: dict[bytes, int] = {}

    def free_port(self) -> int:
        for p in range(self.port_count):
            if p not in self.ports:
                return p
        raise PortOccupied(f"switch {self.id} has no free port")

    def __repr__(self) -> str:
        return f"Switch({self.id!r}, {len(self.ports)}/{self.port_count} ports used)"


class PortLink:
    """What an attached endpoint sees of the fabric."""

    def __init__(self, fabric: Fabric, endpoint):
        self.fabric = fabric
        self.endpoint = endpoint

    def send(self, raw: bytes) -> None:
        self.fabric.send(self.endpoint, raw)

    def defer(self, delay_s: float, fn: Callable[[], None]) -> None:
        self.fabric.schedule(delay_s, fn)

    def now(self) -> float:
        return self.fabric.now

    def wait(self, timeout_s: float, until: Optional[Callable[[], bool]] = None) -> bool:
        """Advance the simulation until ``until()`` holds or ``timeout_s`` elapses."""
        fab = self.fabric
        fab.run_until(fab.now + timeout_s, until=until)
        return until() if until is not None else True

    def every(self, period_s: float, fn: Callable[[], None]) -> Callable[[], None]:
        return self.fabric.every(period_s, fn)

    def stream(self, frames) -> None:
        """Send frames back to back, handing each to the fabric only once the previous one has left."""
        fab, ep = self.fabric, self.endpoint
        it = iter(frames)

        def pump():
            for raw in it:
                depart = fab.send(ep, raw)
                if depart > fab.now_ns:
                    fab.call_at(depart, pump)
                    return

        pump()

    def estimate_tx(self, n_frames: int, frame_bytes: int) -> float:
        """Expected time to push ``n_frames`` out of this port and across the fabric."""
        att = self.fabric._attachments[self.endpoint]
        p = att.params
        per = att.overhead_ns + p.serialization_ns(frame_bytes)
        hops = 2 + len(self.fabric.switches)
        return (n_frames * per + hops * (p.serialization_ns(frame_bytes) + p.latency_ns)) / NS


class Fabric:
    def __init__(self, link_params: Optional[LinkParams] = None, *, seed: int = 0, trace: bool = False):
        self.link_params = link_params or LinkParams()
        self.switches: dict[str, Switch] = {}
        self.now_ns = 0
        self._queue: list = []
        self._seq = 0
        self._pending = 0  # non-daemon events in the queue
        self._attachments: dict[object, _Attachment] = {}
        self._epochs: Counter = Counter()
        self._rng = random.Random(seed)
        self.stats = FabricStats()
        self._drops: Counter = Counter()
        self.trace: Optional[list] = [] if trace else None

    # -- topology -------------------------------------------------------------

    def add_switch(self, switch_id: str, port_count: int = 12) -> Switch:
        if switch_id in self.switches:
            raise TopologyError(f"duplicate switch {switch_id!r}")
        sw = Switch(switch_id, port_count)
        self.switches[switch_id] = sw
        return sw

    def _switch(self, switch_id: str) -> Switch:
        try:
            return self.switches[switch_id]
        except KeyError:
            raise UnknownSwitch(switch_id) from None

    def add_trunk(self, a: str, b: str, port_a: Optional[int] = None, port_b: Optional[int] = None,
                  params: Optional[LinkParams] = None) -> None:
        sa, sb = self._switch(a), self._switch(b)
        if sa is sb:
            raise TopologyError("a trunk must join two different switches")
        if self._connected(sa, sb):
            raise TopologyError(f"trunk {a}-{b} would close a loop")
        pa = sa.free_port() if port_a is None else port_a
        pb = sb.free_port() if port_b is None else port_b
        for sw, p in ((sa, pa), (sb, pb)):
            if not 0 <= p < sw.port_count:
                raise TopologyError(f"switch {sw.id} has no port {p}")
            if p in sw.ports:
                raise PortOccupied(f"{sw.id}:{p}")
        params = params or self.link_params
        sa.ports[pa] = _Trunk(sa, pa, sb, pb, params)
        sb.ports[pb] = _Trunk(sb, pb, sa, pa, params)
        sa.busy_ns[pa] = sb.busy_ns[pb] = 0

    def _connected(self, a: Switch, b: Switch) -> bool:
        seen, stack = {a.id}, [a]
        while stack:
            sw = stack.pop()
            if sw is b:
                return True
            for link in sw.ports.values():
                if isinstance(link, _Trunk) and link.peer.id not in seen:
                    seen.add(link.peer.id)
                    stack.append(link.peer)
        return False

    def attach(self, endpoint, switch_id: str, port: Optional[int] = None, *,
               overhead_s: float = 0.0, params: Optional[LinkParams] = None) -> int:
        """Plug ``endpoint`` into a switch port; returns the port number.

        ``overhead_s`` is the endpoint's own per-frame transmit cost (hosts
        use the link's ``per_frame_overhead_s``; FPGAs packetize at line rate).
        """
        sw = self._switch(switch_id)
        if endpoint in self._attachments:
            raise AlreadyAttached(repr(endpoint))
        port = sw.free_port() if port is None else port
        if not 0 <= port < sw.port_count:
            raise TopologyError(f"switch {switch_id} has no port {port}")
        if port in sw.ports:
            raise PortOccupied(f"{switch_id}:{port}")
        self._epochs[endpoint] += 1
        att = _Attachment(endpoint, sw, port, params or self.link_params, round(overhead_s * NS),
                          self._epochs[endpoint])
        att.busy_ns = self.now_ns
        sw.ports[port] = att
        sw.busy_ns[port] = self.now_ns
        self._attachments[endpoint] = att
        endpoint.on_link_up(PortLink(self, endpoint))
        return port

    def detach(self, endpoint) -> None:
        att = self._attachments.pop(endpoint, None)
        if att is None:
            raise NotAttached(repr(endpoint))
        del att.switch.ports[att.port]
        del att.switch.busy_ns[att.port]
        mac = endpoint.mac.octets
        for sw in self.switches.values():
            sw.mac_table.pop(mac, None)
        self._epochs[endpoint] += 1
        endpoint.on_link_down()

    def is_attached(self, endpoint) -> bool:
        return endpoint in self._attachments

    def location(self, endpoint) -> tuple[str, int]:
        att = self._attachments.get(endpoint)
        if att is None:
            raise NotAttached(repr(endpoint))
        return att.switch.id, att.port

    def endpoints(self) -> list:
        return list(self._attachments)

    def set_loss(self, endpoint, probability: float) -> None:
        """Inject frame loss on an endpoint's access link (both directions)."""
        att = self._attachments.get(endpoint)
        if att is None:
            raise NotAttached(repr(endpoint))
        att.params = replace(att.params, loss=probability)

    # -- clock ------------------------------------------------------------------

    @property
    def now(self) -> float:
        return self.now_ns / NS

    def call_at(self, t_ns: int, fn: Callable, *args, daemon: bool = False) -> None:
        if t_ns < self.now_ns:
            t_ns = self.now_ns
        self._seq += 1
        if not daemon:
            self._pending += 1
        heapq.heappush(self._queue, (t_ns, self._seq, daemon, fn, args))

    def schedule(self, delay_s: float, fn: Callable, *args, daemon: bool = False) -> None:
        self.call_at(self.now_ns + round(delay_s * NS), fn, *args, daemon=daemon)

    def every(self, period_s: float, fn: Callable[[], None], *, first_delay_s: float = 0.0) -> Callable[[], None]:
        """Run ``fn`` periodically as a background timer; returns a cancel function."""
        state = {"on": True}
        period_ns = round(period_s * NS)

        def tick():
            if not state["on"]:
                return
            fn()
            self.call_at(self.now_ns + period_ns, tick, daemon=True)

        self.call_at(self.now_ns + round(first_delay_s * NS), tick, daemon=True)

        def cancel():
            state["on"] = False

        return cancel

    def quiescent(self) -> bool:
        return self._pending == 0

    def run_until(self, time: Optional[float] = None, *, until: Optional[Callable[[], bool]] = None) -> FabricStats:
        """Process events in timestamp order.

        Stops when ``until()`` becomes true, when the next event lies past
        ``time`` (the clock is then advanced to ``time``), or, if no ``time``
        is given, when only background timers are left.
        """
        limit = None if time is None else round(time * NS)
        queue = self._queue
        while queue:
            if until is not None and until():
                break
            if limit is None and self._pending == 0:
                break
            t_ns, _, daemon, fn, args = queue[0]
            if limit is not None and t_ns > limit:
                self.now_ns = max(self.now_ns, limit)
                break
            heapq.heappop(queue)
            if not daemon:
                self._pending -= 1
            self.now_ns = t_ns
            fn(*args)
        else:
            if limit is not None and (until is None or not until()):
                self.now_ns = max(self.now_ns, limit)
        return self.snapshot()

    def snapshot(self) -> FabricStats:
        s = self.stats
        s.sim_time = self.now
        s.dropped = sum(self._drops.values())
        s.drops = dict(self._drops)
        return replace(s, drops=dict(self._drops))

    # -- data path ------------------------------------------------------------

    def send(self, endpoint, raw: bytes) -> int:
        """Transmit ``raw`` from ``endpoint``; returns the departure time in ns."""
        att = self._attachments.get(endpoint)
        if att is None:
            raise NotAttached(repr(endpoint))
        dst, src, etype = fr.peek_header(raw)
        bcast = dst == fr.BROADCAST.octets
        stats = self.stats
        stats.frames += 1

        if bcast:
            intended = {a.endpoint for a in self._attachments.values() if a is not att}
        else:
            intended = {a.endpoint for a in self._attachments.values()
                        if a is not att and a.endpoint.mac.octets == dst}
        stats.sent += len(intended) if intended else 1
        if not bcast and not intended:
            self._drops["no_route"] += 1

        p = att.params
        start = max(self.now_ns, att.busy_ns)
        depart = start + att.overhead_ns + p.serialization_ns(len(raw))
        att.busy_ns = depart
        if self.trace is not None:
            self.trace.append((self.now_ns, "send", src.hex(), dst.hex(), etype, depart))
        reached: set = set()
        if not (p.loss and self._rng.random() < p.loss):
            self._forward(att.switch, att.port, depart + p.latency_ns, raw, dst, src, bcast, intended, reached)
        missed = len(intended) - len(reached)
        if missed:
            self._drops["lost"] += missed
        return depart

    def _forward(self, sw: Switch, in_port: int, t_ns: int, raw: bytes, dst: bytes, src: bytes,
                 bcast: bool, intended: set, reached: set) -> None:
        sw.mac_table[src] = in_port
        if bcast:
            egress = [q for q in sw.ports if q != in_port]
        else:
            q = sw.mac_table.get(dst)
            if q is None:
                self.stats.flooded += 1
                egress = [q for q in sw.ports if q != in_port]
            elif q == in_port or q not in sw.ports:
                egress = []
            else:
                egress = [q]
        nbytes = len(raw)
        for q in sorted(egress):
            link = sw.ports[q]
            p = link.params
            start = max(t_ns, sw.busy_ns[q])
            done = start + p.serialization_ns(nbytes)
            sw.busy_ns[q] = done
            if p.loss and self._rng.random() < p.loss:
                continue
            arrive = done + p.latency_ns
            if isinstance(link, _Attachment):
                ep = link.endpoint
                if ep in intended:
                    reached.add(ep)
                    self.call_at(arrive, self._deliver, link, link.epoch, raw)
                else:
                    self.stats.filtered += 1
            else:
                self._forward(link.peer, link.peer_port, arrive, raw, dst, src, bcast, intended, reached)

    def _deliver(self, att: _Attachment, epoch: int, raw: bytes) -> None:
        ep = att.endpoint
        if self._attachments.get(ep) is not att or att.epoch != epoch:
            self._drops["detached"] += 1
            return
        self.stats.delivered += 1
        if self.trace is not None:
            self.trace.append((self.now_ns, "recv", ep.mac.octets.hex(), raw[12:14].hex(), len(raw)))
        ep.receive(raw)


def path_latency_s(params: LinkParams, hops: int, nbytes: int) -> float:
    """Store-and-forward delay of one frame across ``hops`` links, excluding sender overhead."""
    return hops * (params.serialization_ns(nbytes) + params.latency_ns) / NS
