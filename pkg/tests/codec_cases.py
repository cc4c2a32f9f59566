"""Seeded random payload generator shared by the codec tests and the acceptance run."""

import random

from saf import frames as fr
from saf.frames import (
    Discovery, HostProbe, KernelCmd, MacAddress, MemAck, MemWrite, OutputChunk, PrAck, PrChunk,
)

U64 = 2**64 - 1


def _int(rng: random.Random, hi: int) -> int:
    # a fifth of the draws land on the boundaries
    r = rng.random()
    if r < 0.1:
        return 0
    if r < 0.2:
        return hi
    return rng.randint(0, hi)


def _words(rng):
    n = rng.choice([0, 1, fr.MAX_WORDS_PER_FRAME, rng.randint(0, fr.MAX_WORDS_PER_FRAME)])
    return tuple(_int(rng, U64) for _ in range(n))


def _mac(rng):
    return MacAddress(rng.randbytes(6))


def _pr_chunk(rng):
    data = rng.randbytes(rng.choice([0, fr.PR_CHUNK_BYTES, rng.randint(0, fr.PR_CHUNK_BYTES)]))
    offset = rng.randint(0, 2**63)
    return PrChunk(offset, rng.randint(offset + len(data), U64), data)


def _mem_write(rng):
    w = _words(rng)
    offset = 8 * rng.randint(0, 2**58)
    return MemWrite(_int(rng, 0xFFFF), offset, rng.randint(offset + 8 * len(w), U64), w)


CODECS = {
    "discovery": lambda r: Discovery(_mac(r), _mac(r), _int(r, 0xFFFF), _int(r, 0xFFFF)),
    "host_probe": lambda r: HostProbe(_int(r, 0xFFFFFFFF)),
    "pr_chunk": _pr_chunk,
    "pr_ack": lambda r: PrAck(_int(r, 0xFF), r.randbytes(32)),
    "mem_write": _mem_write,
    "mem_ack": lambda r: MemAck(_int(r, 0xFFFF), _int(r, 0xFF)),
    "kernel_cmd": lambda r: KernelCmd(_int(r, U64), _int(r, U64)),
    "output": lambda r: OutputChunk(_int(r, U64), _int(r, U64), _words(r)),
}


def random_payload(name: str, rng: random.Random):
    return CODECS[name](rng)


def round_trip(payload, dst, src) -> None:
    raw = fr.build(dst, src, payload)
    assert len(raw) == max(60, 14 + len(fr.encode_payload(payload)))
    frame, back = fr.parse(raw)
    assert back == payload
    assert (frame.dst, frame.src) == (dst, src)
    assert fr.encode_frame(frame) == raw
    assert fr.build(dst, src, payload) == raw
