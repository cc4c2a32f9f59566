"""Layer-2 frame codec for the standalone accelerator protocol.

Every host/device exchange is a plain Ethernet II frame whose ethertype
selects one of eight message kinds::

    0x80EF  discovery      device -> host   mac0, mac1, vendor_id, product_id
    0x80AA  pr chunk       host -> device   offset, total_len, data (<= 1024 B)
    0x80AB  pr ack         device -> host   status, sha256 digest
    0x80DD  mem write      host -> device   arg_index, offset, total_len, u64 words
    0x80DB  mem ack        device -> host   arg_index, status
    0x80CC  kernel cmd     host -> device   address, data
    0x80CB  output chunk   device -> host   stream_offset, total_len, u64 words
    0x80EE  host probe     host -> all      seq

Layout on the simulated wire is ``dst(6) | src(6) | ethertype(2) | payload``,
zero padded so the payload is at least 46 bytes. There is no preamble and no
FCS; :func:`fcs32` is only used by the raw socket transport. All multi-byte
integers are big-endian. Payloads that carry variable data have an explicit
length or count field so pad bytes can be stripped.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from typing import Union

HEADER_LEN = 14
MIN_PAYLOAD = 46
MAX_PAYLOAD = 1500
MIN_FRAME = HEADER_LEN + MIN_PAYLOAD

PR_CHUNK_BYTES = 1024
MAX_WORDS_PER_FRAME = 180

# CRC-32 of any message followed by its own little-endian FCS.
CRC32_RESIDUE = 0x2144DF1C


class FrameError(ValueError):
    """Base class for codec failures."""


class OversizedPayload(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class UnknownEtherType(FrameError):
    """A well-formed Ethernet frame that is not one of ours.

    The raw bytes are kept so a caller can forward or log foreign traffic.
    """

    def __init__(self, ethertype: int, raw: bytes):
        super().__init__(f"unknown ethertype 0x{ethertype:04X}")
        self.ethertype = ethertype
        self.raw = raw


class MalformedPayload(FrameError):
    def __init__(self, field_name: str, detail: str):
        super().__init__(f"{field_name}: {detail}")
        self.field = field_name


class EtherType(enum.IntEnum):
    DISCOVERY = 0x80EF
    PR_CHUNK = 0x80AA
    PR_ACK = 0x80AB
    MEM_WRITE = 0x80DD
    MEM_ACK = 0x80DB
    KERNEL_CMD = 0x80CC
    OUTPUT = 0x80CB
    HOST_PROBE = 0x80EE


@dataclass(frozen=True, slots=True)
class MacAddress:
    octets: bytes

    def __post_init__(self):
        if len(self.octets) != 6:
            raise ValueError(f"MAC address needs 6 octets, got {len(self.octets)}")

    @classmethod
    def parse(cls, text: str) -> MacAddress:
        parts = text.replace("-", ":").split(":")
        if len(parts) != 6:
            raise ValueError(f"bad MAC address {text!r}")
        return cls(bytes(int(p, 16) for p in parts))

    @classmethod
    def from_int(cls, value: int) -> MacAddress:
        return cls(value.to_bytes(6, "big"))

    def is_broadcast(self) -> bool:
        return self.octets == b"\xff" * 6

    def __str__(self) -> str:
        return ":".join(f"{b:02x}" for b in self.octets)

    def __repr__(self) -> str:
        return f"MacAddress({str(self)!r})"


BROADCAST = MacAddress(b"\xff" * 6)


@dataclass(frozen=True, slots=True)
class Frame:
    dst: MacAddress
    src: MacAddress
    ethertype: int
    payload: bytes = b""


# ---------------------------------------------------------------------------
# typed payloads


@dataclass(frozen=True, slots=True)
class Discovery:
    mac0: MacAddress
    mac1: MacAddress
    vendor_id: int
    product_id: int


@dataclass(frozen=True, slots=True)
class HostProbe:
    seq: int = 0


@dataclass(frozen=True, slots=True)
class PrChunk:
    offset: int
    total_len: int
    data: bytes


@dataclass(frozen=True, slots=True)
class PrAck:
    status: int
    digest: bytes


@dataclass(frozen=True, slots=True)
class MemWrite:
    arg_index: int
    offset: int
    total_len: int
    words: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not isinstance(self.words, tuple):
            object.__setattr__(self, "words", tuple(int(w) for w in self.words))


@dataclass(frozen=True, slots=True)
class MemAck:
    arg_index: int
    status: int


@dataclass(frozen=True, slots=True)
class KernelCmd:
    address: int
    data: int


@dataclass(frozen=True, slots=True)
class OutputChunk:
    stream_offset: int
    total_len: int
    words: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not isinstance(self.words, tuple):
            object.__setattr__(self, "words", tuple(int(w) for w in self.words))


Payload = Union[Discovery, HostProbe, PrChunk, PrAck, MemWrite, MemAck, KernelCmd, OutputChunk]

_U8_MAX = 0xFF
_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF

_DISCOVERY = struct.Struct(">6s6sHH")
_PROBE = struct.Struct(">I")
_PR_HDR = struct.Struct(">QQH")
_PR_ACK = struct.Struct(">B32s")
_MEM_HDR = struct.Struct(">HQQH")
_MEM_ACK = struct.Struct(">HB")
_CMD = struct.Struct(">QQ")
_OUT_HDR = struct.Struct(">QQH")
_ETH_HDR = struct.Struct(">6s6sH")


def _check(name: str, value: int, hi: int) -> None:
    if not 0 <= value <= hi:
        raise MalformedPayload(name, f"{value} outside [0, {hi}]")


def _pack_words(name: str, words) -> bytes:
    try:
        return struct.pack(f">{len(words)}Q", *words)
    except struct.error as exc:
        raise MalformedPayload(name, str(exc)) from None


def _unpack_words(name: str, buf: bytes, start: int, count: int) -> tuple[int, ...]:
    end = start + 8 * count
    if end > len(buf):
        raise MalformedPayload(name, f"count {count} needs {end} bytes, have {len(buf)}")
    return struct.unpack_from(f">{count}Q", buf, start)


def encode_payload(payload: Payload) -> bytes:
    """Serialize a typed payload (without padding)."""
    if isinstance(payload, Discovery):
        _check("vendor_id", payload.vendor_id, _U16_MAX)
        _check("product_id", payload.product_id, _U16_MAX)
        return _DISCOVERY.pack(payload.mac0.octets, payload.mac1.octets, payload.vendor_id, payload.product_id)
    if isinstance(payload, HostProbe):
        _check("seq", payload.seq, _U32_MAX)
        return _PROBE.pack(payload.seq)
    if isinstance(payload, PrChunk):
        n = len(payload.data)
        if n > PR_CHUNK_BYTES:
            raise MalformedPayload("data", f"{n} bytes exceeds {PR_CHUNK_BYTES}")
        _check("offset", payload.offset, _U64_MAX)
        _check("total_len", payload.total_len, _U64_MAX)
        if payload.offset + n > payload.total_len:
            raise MalformedPayload("offset", "chunk extends past total_len")
        return _PR_HDR.pack(payload.offset, payload.total_len, n) + payload.data
    if isinstance(payload, PrAck):
        _check("status", payload.status, _U8_MAX)
        if len(payload.digest) != 32:
            raise MalformedPayload("digest", f"need 32 bytes, got {len(payload.digest)}")
        return _PR_ACK.pack(payload.status, payload.digest)
    if isinstance(payload, MemWrite):
        n = len(payload.words)
        if n > MAX_WORDS_PER_FRAME:
            raise MalformedPayload("words", f"{n} words exceeds {MAX_WORDS_PER_FRAME}")
        _check("arg_index", payload.arg_index, _U16_MAX)
        _check("offset", payload.offset, _U64_MAX)
        _check("total_len", payload.total_len, _U64_MAX)
        if payload.offset % 8:
            raise MalformedPayload("offset", "not a multiple of 8")
        if payload.offset + 8 * n > payload.total_len:
            raise MalformedPayload("offset", "write extends past total_len")
        return _MEM_HDR.pack(payload.arg_index, payload.offset, payload.total_len, n) + _pack_words(
            "words", payload.words
        )
    if isinstance(payload, MemAck):
        _check("arg_index", payload.arg_index, _U16_MAX)
        _check("status", payload.status, _U8_MAX)
        return _MEM_ACK.pack(payload.arg_index, payload.status)
    if isinstance(payload, KernelCmd):
        _check("address", payload.address, _U64_MAX)
        _check("data", payload.data, _U64_MAX)
        return _CMD.pack(payload.address, payload.data)
    if isinstance(payload, OutputChunk):
        n = len(payload.words)
        if n > MAX_WORDS_PER_FRAME:
            raise MalformedPayload("words", f"{n} words exceeds {MAX_WORDS_PER_FRAME}")
        _check("stream_offset", payload.stream_offset, _U64_MAX)
        _check("total_len", payload.total_len, _U64_MAX)
        return _OUT_HDR.pack(payload.stream_offset, payload.total_len, n) + _pack_words("words", payload.words)
    raise TypeError(f"not a payload type: {type(payload).__name__}")


def _need(name: str, buf: bytes, size: int) -> None:
    if len(buf) < size:
        raise MalformedPayload(name, f"need {size} bytes, have {len(buf)}")


def _decode_discovery(buf: bytes) -> Discovery:
    _need("discovery", buf, _DISCOVERY.size)
    m0, m1, vid, pid = _DISCOVERY.unpack_from(buf)
    return Discovery(MacAddress(m0), MacAddress(m1), vid, pid)


def _decode_probe(buf: bytes) -> HostProbe:
    _need("probe", buf, _PROBE.size)
    return HostProbe(*_PROBE.unpack_from(buf))


def _decode_pr_chunk(buf: bytes) -> PrChunk:
    _need("pr_chunk", buf, _PR_HDR.size)
    offset, total, n = _PR_HDR.unpack_from(buf)
    if n > PR_CHUNK_BYTES:
        raise MalformedPayload("data_len", f"{n} exceeds {PR_CHUNK_BYTES}")
    end = _PR_HDR.size + n
    if end > len(buf):
        raise MalformedPayload("data_len", f"{n} bytes declared, {len(buf) - _PR_HDR.size} present")
    if offset + n > total:
        raise MalformedPayload("offset", "chunk extends past total_len")
    return PrChunk(offset, total, bytes(buf[_PR_HDR.size:end]))


def _decode_pr_ack(buf: bytes) -> PrAck:
    _need("pr_ack", buf, _PR_ACK.size)
    return PrAck(*_PR_ACK.unpack_from(buf))


def _decode_mem_write(buf: bytes) -> MemWrite:
    _need("mem_write", buf, _MEM_HDR.size)
    arg, offset, total, n = _MEM_HDR.unpack_from(buf)
    if n > MAX_WORDS_PER_FRAME:
        raise MalformedPayload("count", f"{n} exceeds {MAX_WORDS_PER_FRAME}")
    if offset % 8:
        raise MalformedPayload("offset", "not a multiple of 8")
    if offset + 8 * n > total:
        raise MalformedPayload("offset", "write extends past total_len")
    return MemWrite(arg, offset, total, _unpack_words("count", buf, _MEM_HDR.size, n))


def _decode_mem_ack(buf: bytes) -> MemAck:
    _need("mem_ack", buf, _MEM_ACK.size)
    return MemAck(*_MEM_ACK.unpack_from(buf))


def _decode_cmd(buf: bytes) -> KernelCmd:
    _need("kernel_cmd", buf, _CMD.size)
    return KernelCmd(*_CMD.unpack_from(buf))


def _decode_output(buf: bytes) -> OutputChunk:
    _need("output", buf, _OUT_HDR.size)
    offset, total, n = _OUT_HDR.unpack_from(buf)
    if n > MAX_WORDS_PER_FRAME:
        raise MalformedPayload("count", f"{n} exceeds {MAX_WORDS_PER_FRAME}")
    return OutputChunk(offset, total, _unpack_words("count", buf, _OUT_HDR.size, n))


_DECODERS = {
    EtherType.DISCOVERY: _decode_discovery,
    EtherType.HOST_PROBE: _decode_probe,
    EtherType.PR_CHUNK: _decode_pr_chunk,
    EtherType.PR_ACK: _decode_pr_ack,
    EtherType.MEM_WRITE: _decode_mem_write,
    EtherType.MEM_ACK: _decode_mem_ack,
    EtherType.KERNEL_CMD: _decode_cmd,
    EtherType.OUTPUT: _decode_output,
}

PAYLOAD_TYPES: dict[type, EtherType] = {
    Discovery: EtherType.DISCOVERY,
    HostProbe: EtherType.HOST_PROBE,
    PrChunk: EtherType.PR_CHUNK,
    PrAck: EtherType.PR_ACK,
    MemWrite: EtherType.MEM_WRITE,
    MemAck: EtherType.MEM_ACK,
    KernelCmd: EtherType.KERNEL_CMD,
    OutputChunk: EtherType.OUTPUT,
}


def decode_payload(ethertype: int, buf: bytes) -> Payload:
    """Parse ``buf`` (pad bytes allowed at the end) as the payload for ``ethertype``."""
    try:
        decoder = _DECODERS[ethertype]
    except KeyError:
        raise UnknownEtherType(ethertype, bytes(buf)) from None
    return decoder(buf)


def ethertype_of(payload: Payload) -> EtherType:
    return PAYLOAD_TYPES[type(payload)]


# ---------------------------------------------------------------------------
# frames


def encode_frame(frame: Frame) -> bytes:
    n = len(frame.payload)
    if n > MAX_PAYLOAD:
        raise OversizedPayload(f"payload of {n} bytes exceeds {MAX_PAYLOAD}")
    out = _ETH_HDR.pack(frame.dst.octets, frame.src.octets, frame.ethertype) + frame.payload
    if n < MIN_PAYLOAD:
        out += bytes(MIN_PAYLOAD - n)
    return out


def decode_frame(raw: bytes) -> Frame:
    """Split a wire frame into header fields and (still padded) payload.

    Raises :class:`UnknownEtherType` for frames that are well formed but not
    ours; the exception keeps the raw bytes.
    """
    if len(raw) < MIN_FRAME:
        raise TruncatedFrame(f"{len(raw)} bytes, minimum frame is {MIN_FRAME}")
    dst, src, etype = _ETH_HDR.unpack_from(raw)
    if etype not in _DECODERS:
        raise UnknownEtherType(etype, bytes(raw))
    return Frame(MacAddress(dst), MacAddress(src), etype, bytes(raw[HEADER_LEN:]))


def build(dst: MacAddress, src: MacAddress, payload: Payload) -> bytes:
    """Encode a typed payload straight to wire bytes."""
    return encode_frame(Frame(dst, src, ethertype_of(payload), encode_payload(payload)))


def parse(raw: bytes) -> tuple[Frame, Payload]:
    frame = decode_frame(raw)
    return frame, decode_payload(frame.ethertype, frame.payload)


def peek_header(raw: bytes) -> tuple[bytes, bytes, int]:
    """Return ``(dst, src, ethertype)`` octets without building objects."""
    if len(raw) < HEADER_LEN:
        raise TruncatedFrame(f"{len(raw)} bytes, header is {HEADER_LEN}")
    return _ETH_HDR.unpack_from(raw)


def fcs32(data: bytes) -> int:
    """Ethernet CRC-32 (reflected 0x04C11DB7, init and xorout 0xFFFFFFFF).

    With that convention the CRC of an empty message is 0. The FCS goes on
    the wire least significant byte first, i.e. ``fcs32(x).to_bytes(4, "little")``.
    """
    return zlib.crc32(data) & 0xFFFFFFFF


def append_fcs(raw: bytes) -> bytes:
    return raw + fcs32(raw).to_bytes(4, "little")


def check_fcs(raw_with_fcs: bytes) -> bool:
    return fcs32(raw_with_fcs) == CRC32_RESIDUE
