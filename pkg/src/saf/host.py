"""Remote host: discovers cards, programs them and drives kernels over raw Ethernet.

The host is one control loop. It talks to the network through a *link*
object (the simulated fabric's :class:`~saf.fabric.PortLink` or the raw
socket transport) that offers ``send``, ``stream``, ``wait``, ``every``,
``now`` and ``estimate_tx``. Blocking operations push frames out and then
``wait`` on the link until the expected confirmations arrive or a deadline
passes; each phase is retried as a whole up to ``RetryPolicy.max_retries``
times before the silent devices are marked unreachable.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from . import frames as fr
from .agent import SHELL_PR_RESET, STATUS_OK
from .frames import (
    BROADCAST,
    Discovery,
    EtherType,
    HostProbe,
    KernelCmd,
    MacAddress,
    MemAck,
    MemWrite,
    OutputChunk,
    PrAck,
    PrChunk,
)
from .intervals import IntervalSet

log = logging.getLogger(__name__)


class HostError(Exception):
    pass


class InvalidState(HostError):
    def __init__(self, mac, state, action):
        super().__init__(f"{mac}: cannot {action} while {state.value if state else 'unknown'}")
        self.mac = mac
        self.state = state
        self.action = action


class UnknownDevice(HostError):
    pass


class HostTimeout(HostError):
    def __init__(self, macs, phase):
        macs = list(macs)
        super().__init__(f"{phase}: no answer from {', '.join(map(str, macs))}")
        self.macs = macs
        self.phase = phase


class DigestMismatch(HostError):
    pass


class GapInStream(HostError):
    def __init__(self, mac, gaps):
        super().__init__(f"{mac}: output missing byte ranges {gaps[:4]}{'...' if len(gaps) > 4 else ''}")
        self.mac = mac
        self.gaps = gaps


class DeviceStatusError(HostError):
    """The device answered with a non-zero status."""

    def __init__(self, mac, status, phase):
        super().__init__(f"{mac}: {phase} failed with status {status}")
        self.mac = mac
        self.status = status


class DeviceState(enum.Enum):
    DISCOVERED = "discovered"
    PROGRAMMED = "programmed"
    ARGS_LOADED = "args-loaded"
    RUNNING = "running"
    DONE = "done"
    UNREACHABLE = "unreachable"


S = DeviceState
TRANSITIONS: dict[DeviceState, frozenset] = {
    S.DISCOVERED: frozenset({S.PROGRAMMED}),
    S.PROGRAMMED: frozenset({S.PROGRAMMED, S.ARGS_LOADED}),
    S.ARGS_LOADED: frozenset({S.PROGRAMMED, S.ARGS_LOADED, S.RUNNING}),
    S.RUNNING: frozenset({S.DONE}),
    S.DONE: frozenset({S.PROGRAMMED, S.ARGS_LOADED, S.RUNNING}),
    S.UNREACHABLE: frozenset({S.DISCOVERED}),
}
for _s in S:
    TRANSITIONS[_s] = TRANSITIONS[_s] | {S.UNREACHABLE}

# Which states each host operation may start from.
ALLOWED = {
    "program": frozenset({S.DISCOVERED, S.PROGRAMMED, S.ARGS_LOADED, S.DONE}),
    "write_arg": frozenset({S.PROGRAMMED, S.ARGS_LOADED, S.DONE}),
    "execute": frozenset({S.ARGS_LOADED, S.DONE}),
    "collect": frozenset({S.RUNNING}),
}


@dataclass
class DeviceEntry:
    identity: Discovery
    state: DeviceState = S.DISCOVERED
    last_seen: float = 0.0
    pr_digest: Optional[bytes] = None
    args_written: set = field(default_factory=set)
    expected_args: int = 1
    kernel_status: int = 0
    last_cmd: Optional[KernelCmd] = None

    def to_dict(self) -> dict:
        return {
            "mac": str(self.identity.mac0),
            "mac1": str(self.identity.mac1),
            "vendor_id": f"0x{self.identity.vendor_id:04x}",
            "product_id": f"0x{self.identity.product_id:04x}",
            "state": self.state.value,
            "last_seen": self.last_seen,
            "pr_digest": self.pr_digest.hex() if self.pr_digest else None,
        }


class DeviceRegistry:
    def __init__(self):
        self.entries: dict[MacAddress, DeviceEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, mac) -> bool:
        return mac in self.entries

    def __getitem__(self, mac: MacAddress) -> DeviceEntry:
        try:
            return self.entries[mac]
        except KeyError:
            raise UnknownDevice(str(mac)) from None

    def upsert(self, identity: Discovery, now: float) -> DeviceEntry:
        entry = self.entries.get(identity.mac0)
        if entry is None:
            entry = DeviceEntry(identity, last_seen=now)
            self.entries[identity.mac0] = entry
            log.info("discovered %s", identity.mac0)
        else:
            entry.identity = identity
            entry.last_seen = now
            if entry.state is S.UNREACHABLE:
                self.transition(identity.mac0, S.DISCOVERED)
        return entry

    def touch(self, mac: MacAddress, now: float) -> None:
        entry = self.entries.get(mac)
        if entry is not None:
            entry.last_seen = now

    def transition(self, mac: MacAddress, new: DeviceState) -> None:
        entry = self[mac]
        if new not in TRANSITIONS[entry.state]:
            raise InvalidState(mac, entry.state, f"move to {new.value}")
        entry.state = new

    def require(self, mac: MacAddress, action: str) -> DeviceEntry:
        entry = self[mac]
        if entry.state not in ALLOWED[action]:
            raise InvalidState(mac, entry.state, action)
        return entry

    def macs(self, *states: DeviceState) -> list[MacAddress]:
        return [m for m, e in self.entries.items() if not states or e.state in states]

    def snapshot(self) -> list[dict]:
        return [e.to_dict() for _, e in sorted(self.entries.items(), key=lambda kv: kv[0].octets)]


@dataclass
class RetryPolicy:
    ack_timeout: Optional[float] = None
    max_retries: int = 2
    timeout_factor: float = 3.0
    min_timeout: float = 0.01
    collect_timeout: float = 30.0

    def timeout_for(self, expected_s: float) -> float:
        if self.ack_timeout is not None:
            return self.ack_timeout
        return max(self.timeout_factor * expected_s, self.min_timeout)


class _Broadcast:
    def __repr__(self) -> str:
        return "ALL"


ALL = _Broadcast()
TargetSet = Union[_Broadcast, Sequence[MacAddress]]


class _Collector:
    __slots__ = ("buf", "total", "covered", "status", "complete")

    def __init__(self):
        self.buf = bytearray()
        self.total: Optional[int] = None
        self.covered = IntervalSet()
        self.status = 0
        self.complete = False

    def add(self, chunk: OutputChunk) -> None:
        if chunk.total_len == 0:
            self.total = 0
            self.status = chunk.words[0] if chunk.words else 0
            self.complete = True
            return
        if self.total != chunk.total_len:
            self.total = chunk.total_len
            self.buf = bytearray(chunk.total_len)
            self.covered = IntervalSet()
        data = fr._pack_words("words", chunk.words)
        end = chunk.stream_offset + len(data)
        if end > self.total:
            return
        self.buf[chunk.stream_offset:end] = data
        self.covered.add(chunk.stream_offset, end)
        self.complete = self.covered.covers(0, self.total)


def chunk_bitstream(bitstream: bytes, chunk_bytes: int = fr.PR_CHUNK_BYTES) -> Iterable[PrChunk]:
    total = len(bitstream)
    view = memoryview(bitstream)
    for off in range(0, total, chunk_bytes):
        yield PrChunk(off, total, bytes(view[off:off + chunk_bytes]))


def pad8(data: bytes) -> bytes:
    rem = len(data) % 8
    return data + bytes(8 - rem) if rem else data


def mem_writes(arg_index: int, data: bytes) -> list[MemWrite]:
    """Split argument bytes (zero padded to whole words) into MTU-sized writes."""
    data = pad8(data)
    total = len(data)
    nwords = total // 8
    words = fr._unpack_words("data", data, 0, nwords) if nwords else ()
    step = fr.MAX_WORDS_PER_FRAME
    if not words:
        return [MemWrite(arg_index, 0, 0, ())]
    return [MemWrite(arg_index, 8 * i, total, words[i:i + step]) for i in range(0, nwords, step)]


class Host:
    def __init__(self, mac: MacAddress, retry: Optional[RetryPolicy] = None, name: str = "host"):
        self.mac = mac
        self.name = name
        self.retry = retry or RetryPolicy()
        self.registry = DeviceRegistry()
        self.link = None
        self.failures: dict[MacAddress, str] = {}
        self.phase_times: dict[str, float] = {}
        self._probe_seq = 0
        self._cancel_probe = None
        self._pr_acks: dict[MacAddress, PrAck] = {}
        self._mem_acks: dict[tuple[MacAddress, int], MemAck] = {}
        self._outputs: dict[MacAddress, _Collector] = {}
        self.frames_in = 0
        self._exec_t0: Optional[float] = None

    def __repr__(self) -> str:
        return f"Host({self.mac})"

    # -- endpoint protocol ------------------------------------------------------

    def on_link_up(self, link) -> None:
        self.link = link

    def on_link_down(self) -> None:
        self.link = None
        if self._cancel_probe:
            self._cancel_probe()
            self._cancel_probe = None

    def receive(self, raw: bytes) -> None:
        try:
            frame, payload = fr.parse(raw)
        except fr.FrameError:
            return
        if frame.dst != self.mac and not frame.dst.is_broadcast():
            return
        self.frames_in += 1
        now = self.link.now() if self.link else 0.0
        src = frame.src
        et = frame.ethertype
        if et == EtherType.DISCOVERY:
            if payload.mac0 == src:
                self.registry.upsert(payload, now)
            return
        self.registry.touch(src, now)
        if et == EtherType.PR_ACK:
            self._pr_acks[src] = payload
        elif et == EtherType.MEM_ACK:
            self._mem_acks[(src, payload.arg_index)] = payload
        elif et == EtherType.OUTPUT:
            col = self._outputs.get(src)
            if col is not None and not col.complete:
                col.add(payload)

    # -- helpers --------------------------------------------------------------------

    def _need_link(self):
        if self.link is None:
            raise HostError("host is not attached to a network")
        return self.link

    def _build(self, dst: MacAddress, payload) -> bytes:
        return fr.build(dst, self.mac, payload)

    def _frames(self, dst: MacAddress, payloads) -> Iterable[bytes]:
        return (self._build(dst, p) for p in payloads)

    def _resolve(self, targets: TargetSet) -> tuple[list[MacAddress], bool]:
        if targets is ALL:
            macs = self.registry.macs(*[s for s in S if s is not S.UNREACHABLE])
            return macs, True
        macs = list(targets)
        for m in macs:
            self.registry[m]
        return macs, False

    def _mark_unreachable(self, macs, reason: str) -> None:
        for m in macs:
            self.failures[m] = reason
            if self.registry[m].state is not S.UNREACHABLE:
                self.registry.transition(m, S.UNREACHABLE)
            log.warning("%s unreachable (%s)", m, reason)

    # -- discovery --------------------------------------------------------------------

    def probe(self) -> None:
        self._probe_seq = (self._probe_seq + 1) & 0xFFFFFFFF
        self._need_link().send(self._build(BROADCAST, HostProbe(self._probe_seq)))

    def probe_loop(self, period: float = 1.0) -> None:
        """Broadcast a probe now and then every ``period`` seconds in the background."""
        if self._cancel_probe:
            self._cancel_probe()
        self._cancel_probe = self._need_link().every(period, self.probe)

    def stop_probing(self) -> None:
        if self._cancel_probe:
            self._cancel_probe()
            self._cancel_probe = None

    def discover(self, settle: float = 0.01) -> list[dict]:
        """Probe once, give devices ``settle`` seconds to answer, return the registry."""
        self.probe()
        self._need_link().wait(settle, None)
        return self.registry.snapshot()

    # -- reconfiguration --------------------------------------------------------------

    def program(self, targets: TargetSet, bitstream: bytes, *, input_args: int = 1) -> dict[MacAddress, PrAck]:
        """Send one bitstream to ``targets`` and wait for every PR confirmation.

        With ``ALL`` the chunks go out once as broadcast frames, so every card
        is programmed by the same stream. Devices that stay silent after all
        retries are marked unreachable and listed in ``self.failures``;
        devices whose digest disagrees are listed too but keep their state.
        """
        link = self._need_link()
        macs, bcast = self._resolve(targets)
        if not macs:
            return {}
        if not bitstream:
            raise ValueError("empty bitstream")
        for m in macs:
            self.registry.require(m, "program")
        expected = hashlib.sha256(bitstream).digest()
        for m in macs:
            self._pr_acks.pop(m, None)
            self.failures.pop(m, None)

        n_chunks = -(-len(bitstream) // fr.PR_CHUNK_BYTES)
        frame_len = fr.HEADER_LEN + 18 + min(len(bitstream), fr.PR_CHUNK_BYTES)
        t0 = link.now()

        def send_stream(dsts):
            for d in dsts:
                link.send(self._build(d, KernelCmd(SHELL_PR_RESET, 0)))
                link.stream(self._frames(d, chunk_bitstream(bitstream)))

        def resend(dsts):
            for d in dsts:
                link.stream(self._frames(d, chunk_bitstream(bitstream)))

        pending = set(macs)
        acked: dict[MacAddress, PrAck] = {}
        mismatched: set = set()
        attempt = 0
        send_stream([BROADCAST] if bcast else macs)
        n_streams = 1 if bcast else len(macs)
        while True:
            timeout = self.retry.timeout_for(n_streams * link.estimate_tx(n_chunks, frame_len))
            link.wait(timeout, lambda: all(m in self._pr_acks for m in pending))
            for m in list(pending):
                ack = self._pr_acks.pop(m, None)
                if ack is None:
                    continue
                if ack.status == STATUS_OK and ack.digest == expected:
                    acked[m] = ack
                    pending.discard(m)
                    mismatched.discard(m)
                else:
                    mismatched.add(m)
            if not pending or attempt >= self.retry.max_retries:
                break
            attempt += 1
            log.info("PR retry %d for %d device(s)", attempt, len(pending))
            order = sorted(pending, key=lambda m: m.octets)
            # a wrong digest means a stale session: restart it; silence means resume it
            send_stream([m for m in order if m in mismatched])
            resend([m for m in order if m not in mismatched])
            n_streams = len(order)

        self.phase_times["program"] = link.now() - t0
        for m, ack in acked.items():
            entry = self.registry[m]
            entry.pr_digest = ack.digest
            entry.args_written.clear()
            entry.expected_args = input_args
            self.registry.transition(m, S.PROGRAMMED)
        for m in pending:
            if m in mismatched:
                self.failures[m] = "digest-mismatch"
            else:
                self._mark_unreachable([m], "pr-timeout")
        return acked

    # -- kernel arguments -------------------------------------------------------------

    def write_arg(self, device: MacAddress, arg_index: int, data: bytes) -> MemAck:
        """Load one kernel argument into a device's DDR and wait for its confirmation.

        ``data`` is zero padded to a whole number of 64-bit words.
        """
        return self.write_args([(device, arg_index, data)])[device, arg_index]

    def write_args(self, writes: Sequence[tuple[MacAddress, int, bytes]]) -> dict[tuple[MacAddress, int], MemAck]:
        """Stream several argument loads back to back, then collect all confirmations."""
        link = self._need_link()
        for dev, _, _ in writes:
            self.registry.require(dev, "write_arg")
        plans = {(dev, arg): mem_writes(arg, data) for dev, arg, data in writes}
        for key in plans:
            self._mem_acks.pop(key, None)
        t0 = link.now()

        def send(keys):
            for dev, arg in keys:
                link.stream(self._frames(dev, plans[dev, arg]))

        pending = list(plans)
        got: dict = {}
        attempt = 0
        send(pending)
        while True:
            n_frames = sum(len(plans[k]) for k in pending)
            timeout = self.retry.timeout_for(link.estimate_tx(n_frames, fr.MAX_PAYLOAD + fr.HEADER_LEN))
            link.wait(timeout, lambda: all(k in self._mem_acks for k in pending))
            for k in list(pending):
                ack = self._mem_acks.pop(k, None)
                if ack is not None:
                    got[k] = ack
                    pending.remove(k)
            if not pending or attempt >= self.retry.max_retries:
                break
            attempt += 1
            send(pending)
        self.phase_times["write_args"] = link.now() - t0

        if pending:
            dead = sorted({dev for dev, _ in pending}, key=lambda m: m.octets)
            self._mark_unreachable(dead, "mem-timeout")
            raise HostTimeout(dead, "write_arg")
        for (dev, arg), ack in got.items():
            if ack.status != STATUS_OK:
                raise DeviceStatusError(dev, ack.status, f"write arg {arg}")
            entry = self.registry[dev]
            entry.args_written.add(arg)
            if len(entry.args_written) >= entry.expected_args and entry.state is not S.ARGS_LOADED:
                self.registry.transition(dev, S.ARGS_LOADED)
        return got

    # -- execution ---------------------------------------------------------------------

    def execute(self, targets: TargetSet, cmd: KernelCmd) -> list[MacAddress]:
        """Start a kernel on every target with one command frame (broadcast for ``ALL``)."""
        link = self._need_link()
        macs, bcast = self._resolve(targets)
        for m in macs:
            self.registry.require(m, "execute")
        for m in macs:
            self._outputs[m] = _Collector()
            entry = self.registry[m]
            entry.last_cmd = cmd
            entry.kernel_status = 0
            self.registry.transition(m, S.RUNNING)
        self._exec_t0 = link.now()
        if bcast:
            link.send(self._build(BROADCAST, cmd))
        else:
            for m in macs:
                link.send(self._build(m, cmd))
        return macs

    def collect(self, device: MacAddress, timeout: Optional[float] = None) -> bytes:
        return self.collect_all([device], timeout)[device]

    def collect_all(self, devices: Sequence[MacAddress], timeout: Optional[float] = None) -> dict[MacAddress, bytes]:
        """Wait for the output stream of every device and reassemble it.

        A device that stays silent or leaves holes gets its command re-sent
        (kernels are re-runnable on the same inputs) up to the retry limit.
        Chunks from every attempt fill the same buffer.
        """
        link = self._need_link()
        for d in devices:
            self.registry.require(d, "collect")
        timeout = self.retry.collect_timeout if timeout is None else timeout
        pending = list(devices)
        for d in pending:
            self._outputs.setdefault(d, _Collector())
        attempt = 0
        while True:
            cols = [self._outputs[d] for d in pending]
            link.wait(timeout, lambda: all(c.complete for c in cols))
            pending = [d for d in pending if not self._outputs[d].complete]
            if not pending or attempt >= self.retry.max_retries:
                break
            attempt += 1
            # reruns produce the same stream, so coverage accumulates across attempts
            for d in pending:
                cmd = self.registry[d].last_cmd
                if cmd is not None:
                    link.send(self._build(d, cmd))
        if self._exec_t0 is not None:
            self.phase_times["execute_collect"] = link.now() - self._exec_t0

        if pending:
            gaps = [(d, self._outputs[d]) for d in pending]
            silent = [d for d, c in gaps if c.total is None]
            if silent:
                self._mark_unreachable(silent, "collect-timeout")
            partial = [(d, c) for d, c in gaps if c.total is not None]
            if partial:
                d, c = partial[0]
                raise GapInStream(d, c.covered.gaps(0, c.total))
            raise HostTimeout(silent, "collect")

        out = {}
        for d in devices:
            col = self._outputs.pop(d)
            entry = self.registry[d]
            entry.kernel_status = col.status
            self.registry.transition(d, S.DONE)
            out[d] = bytes(col.buf)
        return out

    def report(self) -> dict:
        return {
            "host": str(self.mac),
            "registry": self.registry.snapshot(),
            "failures": {str(m): r for m, r in sorted(self.failures.items(), key=lambda kv: kv[0].octets)},
            "phase_times": dict(self.phase_times),
        }
