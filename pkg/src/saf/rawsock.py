"""Raw layer-2 transport over a Linux ``AF_PACKET`` socket.

``RawLink`` offers the same link interface as the simulated fabric
(``send``, ``stream``, ``wait``, ``every``, ``defer``, ``now``,
``estimate_tx``), driven by the wall clock. A background thread reads the
socket into a queue; frames are handed to the endpoint only from inside
:meth:`RawLink.wait`, so endpoint state is touched by one thread.

Needs ``CAP_NET_RAW`` (or root).
"""

from __future__ import annotations

import heapq
import itertools
import queue
import socket
import threading
import time
from typing import Callable, Optional

from . import frames as fr

ETH_P_ALL = 0x0003
PACKET_OUTGOING = 4


class RawSocketError(OSError):
    pass


class NoSuchInterface(RawSocketError):
    pass


class PermissionDenied(RawSocketError):
    pass


class RawLink:
    def __init__(self, interface: str, endpoint, *, fcs: bool = False, bandwidth_bps: float = 1e9):
        if not hasattr(socket, "AF_PACKET"):
            raise RawSocketError("AF_PACKET sockets are not available on this platform")
        try:
            socket.if_nametoindex(interface)
        except OSError:
            raise NoSuchInterface(f"no such interface: {interface!r}") from None
        try:
            sock = socket.socket(socket.AF_PACKET, socket.SOCK_RAW, socket.htons(ETH_P_ALL))
        except PermissionError as exc:
            raise PermissionDenied(f"raw sockets need CAP_NET_RAW: {exc}") from None
        sock.bind((interface, 0))
        sock.settimeout(0.05)
        self.interface = interface
        self.endpoint = endpoint
        self.fcs = fcs
        self.bandwidth_bps = bandwidth_bps
        self._sock = sock
        self._inbox: queue.Queue = queue.Queue()
        self._timers: list = []
        self._seq = itertools.count()
        self._t0 = time.monotonic()
        self._stop = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, name=f"rawlink-{interface}", daemon=True)
        self._reader.start()
        self.frames_in = 0
        self.frames_out = 0
        endpoint.on_link_up(self)

    # -- link interface -----------------------------------------------------------------

    def now(self) -> float:
        return time.monotonic() - self._t0

    def send(self, raw: bytes) -> None:
        self._sock.send(fr.append_fcs(raw) if self.fcs else raw)
        self.frames_out += 1

    def stream(self, frames) -> None:
        for raw in frames:
            self.send(raw)

    def defer(self, delay_s: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._timers, (self.now() + delay_s, next(self._seq), fn))

    def every(self, period_s: float, fn: Callable[[], None]) -> Callable[[], None]:
        state = {"on": True}

        def tick():
            if state["on"]:
                fn()
                self.defer(period_s, tick)

        self.defer(0.0, tick)

        def cancel():
            state["on"] = False

        return cancel

    def estimate_tx(self, n_frames: int, frame_bytes: int) -> float:
        return n_frames * frame_bytes * 8 / self.bandwidth_bps + 0.001

    def wait(self, timeout_s: float, until: Optional[Callable[[], bool]] = None) -> bool:
        """Run timers and deliver received frames until ``until()`` holds or time is up."""
        deadline = self.now() + timeout_s
        while True:
            if until is not None and until():
                return True
            now = self.now()
            while self._timers and self._timers[0][0] <= now:
                _, _, fn = heapq.heappop(self._timers)
                fn()
            if now >= deadline:
                break
            nxt = min(deadline, self._timers[0][0]) if self._timers else deadline
            try:
                raw = self._inbox.get(timeout=max(0.0, nxt - now))
            except queue.Empty:
                continue
            self.frames_in += 1
            self.endpoint.receive(raw)
        return until() if until is not None else True

    def close(self) -> None:
        self._stop.set()
        self._reader.join(timeout=1.0)
        self._sock.close()
        self.endpoint.on_link_down()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- reader thread --------------------------------------------------------------------

    def _read_loop(self) -> None:
        own = self.endpoint.mac.octets
        while not self._stop.is_set():
            try:
                raw, addr = self._sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            if addr[2] == PACKET_OUTGOING or len(raw) < fr.HEADER_LEN or raw[6:12] == own:
                continue
            if self.fcs:
                if not fr.check_fcs(raw):
                    continue
                raw = raw[:-4]
            self._inbox.put(raw)
