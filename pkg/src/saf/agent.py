"""Software model of an FPGA running the network-attached shell.

The shell sits between the Ethernet MAC and the rest of the chip. Inbound
frames go through a packet analyzer that drops PR, kernel-command and DDR
payloads into three bounded FIFOs; consumers drain those FIFOs into the PR
engine, the kernel interface and the DDR logic. A tiny discovery FSM makes
the card announce itself the first time it sees any traffic after being
plugged in.

An :class:`Agent` is a single-threaded event handler. Hook it to a transport
by calling :meth:`Agent.on_link_up` with an object that has ``send(raw)``,
``defer(delay_s, fn)`` and ``now()``; without one, every operation runs
synchronously and response frames are returned to the caller.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from . import frames as fr
from .frames import (
    BROADCAST,
    Discovery,
    EtherType,
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

DEFAULT_FIFO_DEPTH = 4096
DEFAULT_ARG_REGION = 64 * 1024 * 1024
DEFAULT_DDR_CAPACITY = 8 * 1024 * 1024 * 1024
CONTROL_STRIDE = 0x100

# Shell register (outside every kernel window) that clears the PR engine so a
# new bitstream of the same length is not mistaken for a retransmission.
SHELL_PR_RESET = 0xFFFF_FFFF_FFFF_FF00

# MemAck / PrAck status codes
STATUS_OK = 0
STATUS_REGION_OVERFLOW = 1
STATUS_NO_KERNEL = 2
STATUS_BAD_ARG = 3
STATUS_BAD_LENGTH = 4
STATUS_KERNEL_FAULT = 5


class AgentError(Exception):
    pass


class FifoOverflow(AgentError):
    pass


class SourceBusy(AgentError):
    """The PR mux is held by the other programming channel."""


class LengthMismatch(AgentError):
    pass


class KernelBusy(AgentError):
    pass


class RegionOverflow(AgentError):
    pass


class NoKernelConfigured(AgentError):
    pass


class BadArgument(AgentError):
    pass


class UnknownControlAddress(AgentError):
    pass


class AddressCollision(AgentError):
    pass


class KernelFault(AgentError):
    pass


class Link(Protocol):
    def send(self, raw: bytes) -> None: ...

    def defer(self, delay_s: float, fn: Callable[[], None]) -> None: ...

    def now(self) -> float: ...


class Fifo:
    """Bounded FIFO that raises instead of blocking when full."""

    def __init__(self, capacity: int = DEFAULT_FIFO_DEPTH):
        self.capacity = capacity
        self._q: deque = deque()
        self.overflows = 0

    def push(self, item) -> None:
        if len(self._q) >= self.capacity:
            self.overflows += 1
            raise FifoOverflow(f"fifo full ({self.capacity})")
        self._q.append(item)

    def pop(self):
        return self._q.popleft()

    def __len__(self) -> int:
        return len(self._q)

    def __bool__(self) -> bool:
        return bool(self._q)


# ---------------------------------------------------------------------------
# partial reconfiguration


class PrState(enum.Enum):
    IDLE = "idle"
    RECEIVING = "receiving"
    DONE = "done"
    ERROR = "error"


class Source(enum.Enum):
    PCIE = "pcie"
    ETHERNET = "ethernet"


class PrEngine:
    """PR IP wrapper: source mux, coverage tracking and running digest.

    Chunks may arrive in any order and more than once. Bytes are hashed as
    soon as they extend the contiguous prefix from offset 0; chunks that land
    beyond the prefix wait in ``_pending`` until the gap closes, so in-order
    delivery needs no buffering at all.
    """

    def __init__(self):
        self.mux_select = Source.PCIE
        self.active_source: Optional[Source] = None
        self.reset()

    def reset(self) -> None:
        self.state = PrState.IDLE
        self.total_len = 0
        self.received = IntervalSet()
        self.digest: Optional[bytes] = None
        self._hasher = hashlib.sha256()
        self._hashed = 0
        self._pending: dict[int, bytes] = {}
        self._pending_offsets: list[int] = []
        if self.active_source is Source.ETHERNET:
            self.active_source = None

    # PCIe side is modeled only as far as it occupies the mux.
    def pcie_begin(self) -> None:
        if self.active_source is Source.ETHERNET:
            raise SourceBusy("ethernet PR session in progress")
        self.active_source = Source.PCIE
        self.mux_select = Source.PCIE

    def pcie_end(self) -> None:
        if self.active_source is Source.PCIE:
            self.active_source = None

    def accept(self, chunk: PrChunk) -> bool:
        """Take one Ethernet chunk. Returns True when this chunk completed the bitstream."""
        if self.active_source is Source.PCIE:
            raise SourceBusy("PCIe programming channel occupied")
        if self.state is PrState.DONE:
            if chunk.total_len == self.total_len:
                return False
            self.reset()
        if self.state is PrState.IDLE or self.state is PrState.ERROR:
            if self.state is PrState.ERROR:
                self.reset()
            self.state = PrState.RECEIVING
            self.total_len = chunk.total_len
            self.active_source = Source.ETHERNET
            self.mux_select = Source.ETHERNET
        elif chunk.total_len != self.total_len:
            raise LengthMismatch(f"chunk total_len {chunk.total_len} != session {self.total_len}")

        end = chunk.offset + len(chunk.data)
        if end > self.total_len:
            raise LengthMismatch(f"chunk ends at {end}, past {self.total_len}")
        if self.received.covers(chunk.offset, end):
            return False
        self.received.add(chunk.offset, end)
        if chunk.offset <= self._hashed:
            self._feed(chunk.offset, chunk.data)
            self._drain_pending()
        else:
            prev = self._pending.get(chunk.offset)
            if prev is None:
                heapq.heappush(self._pending_offsets, chunk.offset)
            if prev is None or len(prev) < len(chunk.data):
                self._pending[chunk.offset] = chunk.data

        if self.received.covers(0, self.total_len):
            if self._hashed != self.total_len:
                self.state = PrState.ERROR
                raise LengthMismatch("coverage complete but digest stream has a hole")
            self.state = PrState.DONE
            self.digest = self._hasher.digest()
            self.active_source = None
            return True
        return False

    def _feed(self, offset: int, data: bytes) -> None:
        skip = self._hashed - offset
        if skip < len(data):
            self._hasher.update(data[skip:] if skip else data)
            self._hashed = offset + len(data)

    def _drain_pending(self) -> None:
        heap = self._pending_offsets
        while heap and heap[0] <= self._hashed:
            o = heapq.heappop(heap)
            self._feed(o, self._pending.pop(o))


# ---------------------------------------------------------------------------
# DDR


def pack_512(words) -> int:
    """Eight 64-bit words into one 512-bit DDR word; word j fills bits [64j, 64j+64)."""
    if len(words) != 8:
        raise ValueError("a 512-bit word holds exactly 8 lanes")
    value = 0
    for j, w in enumerate(words):
        value |= (int(w) & 0xFFFFFFFFFFFFFFFF) << (64 * j)
    return value


def unpack_512(value: int) -> list[int]:
    return [(value >> (64 * j)) & 0xFFFFFFFFFFFFFFFF for j in range(8)]


class DdrMemory:
    """512-bit wide DDR with one fixed-size region per kernel argument.

    Each region is stored as an ``(n, 8)`` uint64 array, i.e. ``n`` DDR words
    of eight 64-bit lanes. Only the extent named by the incoming
    ``total_len`` is materialized.
    """

    def __init__(self, capacity: int = DEFAULT_DDR_CAPACITY, arg_region_size: int = DEFAULT_ARG_REGION):
        if arg_region_size % 64:
            raise ValueError("argument regions must be a whole number of 512-bit words")
        self.capacity = capacity
        self.arg_region_size = arg_region_size
        self.regions: dict[int, np.ndarray] = {}
        self.lengths: dict[int, int] = {}
        self.coverage: dict[int, IntervalSet] = {}

    def base_address(self, arg_index: int) -> int:
        return arg_index * self.arg_region_size

    def _region(self, arg_index: int, total_len: int) -> np.ndarray:
        if total_len > self.arg_region_size or self.base_address(arg_index) + total_len > self.capacity:
            raise RegionOverflow(f"arg {arg_index}: {total_len} bytes exceeds region of {self.arg_region_size}")
        region = self.regions.get(arg_index)
        if region is None or self.lengths[arg_index] != total_len:
            region = np.zeros(((total_len + 63) // 64, 8), dtype=np.uint64)
            self.regions[arg_index] = region
            self.lengths[arg_index] = total_len
            self.coverage[arg_index] = IntervalSet()
        return region

    def write(self, arg_index: int, offset: int, total_len: int, words) -> bool:
        """Store 64-bit words at byte ``offset`` of an argument region.

        Returns True when ``[0, total_len)`` of the region is fully written.
        A write at offset 0 into an already complete region starts a new
        transfer.
        """
        if total_len % 8 or offset % 8:
            raise BadArgument("DDR transfers are in whole 64-bit words")
        end = offset + 8 * len(words)
        if end > total_len:
            raise RegionOverflow(f"write ends at {end}, past total_len {total_len}")
        region = self._region(arg_index, total_len)
        cov = self.coverage[arg_index]
        if offset == 0 and cov.covers(0, total_len) and total_len:
            cov.clear()
        if words:
            flat = region.reshape(-1)
            flat[offset // 8 : end // 8] = np.asarray(words, dtype=np.uint64)
        cov.add(offset, end)
        return cov.covers(0, total_len)

    def is_complete(self, arg_index: int) -> bool:
        cov = self.coverage.get(arg_index)
        return cov is not None and cov.covers(0, self.lengths[arg_index])

    def read_words(self, arg_index: int) -> np.ndarray:
        region = self.regions.get(arg_index)
        if region is None:
            return np.zeros(0, dtype=np.uint64)
        return region.reshape(-1)[: self.lengths[arg_index] // 8].copy()

    def read_word512(self, arg_index: int, index: int) -> int:
        return pack_512(self.regions[arg_index][index])

    def store_output(self, arg_index: int, words: np.ndarray) -> None:
        total = 8 * len(words)
        region = self._region(arg_index, total)
        region.reshape(-1)[: len(words)] = words
        self.coverage[arg_index].add(0, total)


# ---------------------------------------------------------------------------
# kernels


def _no_time(inputs, param) -> float:
    return 0.0


@dataclass
class KernelSlot:
    """One kernel in the role.

    ``run(inputs, param)`` receives the input argument regions (every
    argument except the last) as uint64 arrays plus the 64-bit command data
    word, and returns the output words. The last argument region holds the
    output. ``compute_time`` gives the modeled on-device run time in seconds.
    """

    kernel_id: int
    arg_count: int
    run: Callable[[list, int], np.ndarray]
    name: str = "kernel"
    compute_time: Callable[[list, int], float] = field(default=_no_time)

    @property
    def control_base(self) -> int:
        return self.kernel_id * CONTROL_STRIDE

    @property
    def output_arg(self) -> int:
        return self.arg_count - 1


class Fsm(enum.Enum):
    LINK_DOWN = "link-down"
    AWAIT_FIRST_FRAME = "await-first-frame"
    DISCOVERY_SENT = "discovery-sent"


_HOST_TO_DEVICE = frozenset(
    {EtherType.HOST_PROBE, EtherType.PR_CHUNK, EtherType.MEM_WRITE, EtherType.KERNEL_CMD}
)

ROUTES = ("pr_fifo", "cmd_fifo", "mem_fifo", "direct", "ignored", "overflow")


class Agent:
    def __init__(
        self,
        identity: Discovery,
        *,
        fifo_depth: int = DEFAULT_FIFO_DEPTH,
        arg_region_size: int = DEFAULT_ARG_REGION,
        ddr_capacity: int = DEFAULT_DDR_CAPACITY,
        name: Optional[str] = None,
    ):
        self.identity = identity
        self.name = name or str(identity.mac0)
        self.discovery_fsm = Fsm.LINK_DOWN
        self.pr_fifo = Fifo(fifo_depth)
        self.cmd_fifo = Fifo(fifo_depth)
        self.mem_fifo = Fifo(fifo_depth)
        self.pr_engine = PrEngine()
        self.ddr = DdrMemory(ddr_capacity, arg_region_size)
        self.kernel_slots: dict[int, KernelSlot] = {}
        self.running: Optional[KernelSlot] = None
        self.link: Optional[Link] = None
        self.routes: Counter = Counter()
        self.errors: Counter = Counter()
        self.discoveries_sent = 0
        self.epoch = 0

    @property
    def mac(self) -> MacAddress:
        return self.identity.mac0

    def __repr__(self) -> str:
        return f"Agent({self.name})"

    # -- attachment ---------------------------------------------------------

    def on_link_up(self, link: Optional[Link] = None) -> None:
        self.link = link
        self.epoch += 1
        self.discovery_fsm = Fsm.AWAIT_FIRST_FRAME

    def on_link_down(self) -> None:
        self.link = None
        self.discovery_fsm = Fsm.LINK_DOWN

    # -- PCIe side of the mux ----------------------------------------------

    def pcie_program_begin(self) -> None:
        self.pr_engine.pcie_begin()

    def pcie_program_end(self) -> None:
        self.pr_engine.pcie_end()

    # -- kernels -------------------------------------------------------------

    def register_kernel(self, slot: KernelSlot) -> None:
        for other in self.kernel_slots.values():
            if other.control_base == slot.control_base:
                raise AddressCollision(f"control base 0x{slot.control_base:X} taken by {other.name}")
        if slot.arg_count < 1:
            raise ValueError("a kernel needs at least an output argument")
        if slot.arg_count * self.ddr.arg_region_size > self.ddr.capacity:
            raise RegionOverflow("argument regions exceed DDR capacity")
        self.kernel_slots[slot.control_base] = slot

    @property
    def arg_count(self) -> int:
        return max((s.arg_count for s in self.kernel_slots.values()), default=0)

    # -- frame path ------------------------------------------------------------

    def receive(self, raw: bytes) -> None:
        """Transport entry point: process and transmit any responses."""
        for out in self.on_frame(raw):
            self._transmit(out)

    def on_frame(self, raw: bytes) -> list[bytes]:
        out = self.ingest(raw)
        out.extend(self.service())
        return out

    def ingest(self, raw: bytes) -> list[bytes]:
        """Packet analyzer: classify one frame into exactly one route.

        Returns frames produced directly (the discovery announcement).
        """
        out: list[bytes] = []
        if self.discovery_fsm is Fsm.LINK_DOWN:
            self.routes["ignored"] += 1
            return out
        try:
            dst, src, etype = fr.peek_header(raw)
        except fr.TruncatedFrame:
            self.routes["ignored"] += 1
            self.errors["truncated"] += 1
            return out
        if dst != self.mac.octets and dst != BROADCAST.octets:
            self.routes["ignored"] += 1
            return out
        src_mac = MacAddress(src)

        if self.discovery_fsm is Fsm.AWAIT_FIRST_FRAME:
            to = src_mac if etype in _HOST_TO_DEVICE else BROADCAST
            out.append(fr.build(to, self.mac, self.identity))
            self.discovery_fsm = Fsm.DISCOVERY_SENT
            self.discoveries_sent += 1

        if etype == EtherType.PR_CHUNK:
            fifo, route = self.pr_fifo, "pr_fifo"
        elif etype == EtherType.KERNEL_CMD:
            fifo, route = self.cmd_fifo, "cmd_fifo"
        elif etype == EtherType.MEM_WRITE:
            fifo, route = self.mem_fifo, "mem_fifo"
        else:
            self.routes["direct" if etype in fr.PAYLOAD_TYPES.values() else "ignored"] += 1
            return out
        try:
            fifo.push((src_mac, raw))
        except FifoOverflow:
            self.routes["overflow"] += 1
            self.errors["fifo_overflow"] += 1
            return out
        self.routes[route] += 1
        return out

    def service(self) -> list[bytes]:
        """Drain all three FIFOs into their consumers."""
        out: list[bytes] = []
        for fifo, handler in (
            (self.pr_fifo, self._handle_pr),
            (self.mem_fifo, self._handle_mem),
            (self.cmd_fifo, self._handle_cmd),
        ):
            while fifo:
                src, raw = fifo.pop()
                try:
                    payload = fr.decode_payload(raw[12] << 8 | raw[13], raw[fr.HEADER_LEN:])
                except fr.FrameError as exc:
                    self.errors["malformed"] += 1
                    log.debug("%s: malformed frame: %s", self.name, exc)
                    continue
                out.extend(handler(src, payload))
        return out

    def _handle_pr(self, src: MacAddress, chunk: PrChunk) -> list[bytes]:
        try:
            ack = self.pr_process(chunk, reply_to=src)
        except SourceBusy:
            self.errors["source_busy"] += 1
            return []
        except KernelBusy:
            self.errors["kernel_busy"] += 1
            return []
        except LengthMismatch:
            self.errors["length_mismatch"] += 1
            return []
        return [ack] if ack else []

    def _handle_mem(self, src: MacAddress, mw: MemWrite) -> list[bytes]:
        ack = self.ddr_write(mw, reply_to=src)
        return [ack] if ack else []

    def _handle_cmd(self, src: MacAddress, cmd: KernelCmd) -> list[bytes]:
        try:
            return self.exec_cmd(cmd, reply_to=src)
        except UnknownControlAddress:
            self.errors["unknown_address"] += 1
            return []
        except KernelBusy:
            self.errors["kernel_busy"] += 1
            return []

    # -- consumers ---------------------------------------------------------

    def pr_process(self, chunk: PrChunk, reply_to: MacAddress = BROADCAST) -> Optional[bytes]:
        """Feed one bitstream chunk; returns the 0x80AB frame on completion.

        A chunk that reaches the end of an already finished bitstream makes
        the engine repeat its ack, so a host whose ack was lost can recover
        by resending.
        """
        if self.running is not None:
            raise KernelBusy(f"{self.running.name} is running")
        eng = self.pr_engine
        was_done = eng.state is PrState.DONE and chunk.total_len == eng.total_len
        completed = eng.accept(chunk)
        if completed or (was_done and chunk.offset + len(chunk.data) == eng.total_len):
            return fr.build(reply_to, self.mac, PrAck(STATUS_OK, eng.digest))
        return None

    def ddr_write(self, mw: MemWrite, reply_to: MacAddress = BROADCAST) -> Optional[bytes]:
        """Land one MemWrite in DDR; returns a 0x80DB frame on completion or error."""
        status = STATUS_OK
        completed = False
        if not self.kernel_slots:
            status = STATUS_NO_KERNEL
        elif mw.arg_index >= self.arg_count:
            status = STATUS_BAD_ARG
        elif mw.total_len % 8:
            status = STATUS_BAD_LENGTH
        else:
            ddr = self.ddr
            was_complete = ddr.is_complete(mw.arg_index) and ddr.lengths[mw.arg_index] == mw.total_len
            try:
                completed = ddr.write(mw.arg_index, mw.offset, mw.total_len, mw.words)
            except RegionOverflow:
                status = STATUS_REGION_OVERFLOW
            end = mw.offset + 8 * len(mw.words)
            # duplicate of a finished transfer: only its last frame re-acks
            if completed and was_complete and mw.offset != 0 and end != mw.total_len:
                completed = False
        if status != STATUS_OK:
            self.errors[f"mem_status_{status}"] += 1
            return fr.build(reply_to, self.mac, MemAck(mw.arg_index, status))
        if completed:
            return fr.build(reply_to, self.mac, MemAck(mw.arg_index, STATUS_OK))
        return None

    def exec_cmd(self, cmd: KernelCmd, reply_to: MacAddress = BROADCAST) -> list[bytes]:
        """Write to a kernel control register; offset 0 of a slot starts it."""
        if cmd.address == SHELL_PR_RESET:
            if self.pr_engine.active_source is not Source.PCIE:
                self.pr_engine.reset()
            return []
        slot = self.kernel_slots.get(cmd.address)
        if slot is None:
            raise UnknownControlAddress(f"0x{cmd.address:X}")
        if self.running is not None:
            raise KernelBusy(f"{self.running.name} is running")

        inputs = [self.ddr.read_words(i) for i in range(slot.arg_count - 1)]
        try:
            result = np.ascontiguousarray(slot.run(inputs, cmd.data), dtype=np.uint64).reshape(-1)
            self.ddr.store_output(slot.output_arg, result)
            frames_out = self._packetize(reply_to, result)
        except Exception as exc:  # a faulting kernel must not take the shell down
            log.warning("%s: kernel %s failed: %s", self.name, slot.name, exc)
            self.errors["kernel_fault"] += 1
            frames_out = [fr.build(reply_to, self.mac, OutputChunk(0, 0, (STATUS_KERNEL_FAULT,)))]
        delay = slot.compute_time(inputs, cmd.data)

        if self.link is None:
            return frames_out
        self.running = slot

        def finish():
            self.running = None
            for f in frames_out:
                self._transmit(f)

        self.link.defer(delay, finish)
        return []

    def _packetize(self, to: MacAddress, words: np.ndarray) -> list[bytes]:
        total = 8 * len(words)
        if total == 0:
            return [fr.build(to, self.mac, OutputChunk(0, 0, ()))]
        vals = words.tolist()
        step = fr.MAX_WORDS_PER_FRAME
        return [
            fr.build(to, self.mac, OutputChunk(8 * i, total, tuple(vals[i : i + step])))
            for i in range(0, len(vals), step)
        ]

    def _transmit(self, raw: bytes) -> None:
        if self.link is not None:
            self.link.send(raw)

    def snapshot(self) -> dict:
        return {
            "mac": str(self.mac),
            "fsm": self.discovery_fsm.value,
            "pr_state": self.pr_engine.state.value,
            "pr_digest": self.pr_engine.digest.hex() if self.pr_engine.digest else None,
            "routes": dict(self.routes),
            "errors": dict(self.errors),
        }
