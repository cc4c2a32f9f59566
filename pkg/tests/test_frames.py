import hashlib
import random

import pytest
from hypothesis import given, settings, strategies as st

from codec_cases import CODECS, random_payload, round_trip as _round_trip
from saf import frames as fr
from saf.frames import (
    BROADCAST, Discovery, EtherType, Frame, HostProbe, KernelCmd, MacAddress, MemAck, MemWrite,
    OutputChunk, PrAck, PrChunk,
)

HOST = MacAddress.parse("02:00:00:00:00:01")
DEV = MacAddress.parse("02:5a:00:00:00:01")
DEV1 = MacAddress.parse("02:5a:00:00:00:81")

ROUND_TRIPS = 2_000


# -- independent reference encoder ------------------------------------------------------
# Built from int.to_bytes only, so it shares no code with the codec under test.

def be(value, width):
    return value.to_bytes(width, "big")


def hand_frame(dst, src, etype, payload):
    body = bytes.fromhex(dst.replace(":", "")) + bytes.fromhex(src.replace(":", "")) + be(etype, 2) + payload
    return body + bytes(max(0, 60 - len(body)))


GOLDEN = {
    "discovery": (
        Discovery(DEV, DEV1, 0x1172, 0x385A),
        hand_frame("02:00:00:00:00:01", "02:5a:00:00:00:01", 0x80EF,
                   bytes.fromhex("025a00000001" "025a00000081") + b"\x11\x72" + b"\x38\x5a"),
        HOST,
    ),
    "pr_chunk": (
        PrChunk(1024, 97_400_000, b"\xde\xad\xbe\xef"),
        hand_frame("ff:ff:ff:ff:ff:ff", "02:00:00:00:00:01", 0x80AA,
                   be(1024, 8) + be(97_400_000, 8) + be(4, 2) + b"\xde\xad\xbe\xef"),
        BROADCAST,
    ),
    "pr_ack": (
        PrAck(0, hashlib.sha256(b"abc").digest()),
        hand_frame("02:00:00:00:00:01", "02:5a:00:00:00:01", 0x80AB,
                   b"\x00" + bytes.fromhex("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")),
        HOST,
    ),
    "mem_write": (
        MemWrite(1, 8, 32, (1, 2, 3)),
        hand_frame("02:5a:00:00:00:01", "02:00:00:00:00:01", 0x80DD,
                   be(1, 2) + be(8, 8) + be(32, 8) + be(3, 2) + be(1, 8) + be(2, 8) + be(3, 8)),
        DEV,
    ),
    "mem_ack": (
        MemAck(2, 4),
        hand_frame("02:00:00:00:00:01", "02:5a:00:00:00:01", 0x80DB, be(2, 2) + be(4, 1)),
        HOST,
    ),
    "kernel_cmd": (
        KernelCmd(0x100, 0x0000_0200_0000_0040),
        hand_frame("ff:ff:ff:ff:ff:ff", "02:00:00:00:00:01", 0x80CC, be(0x100, 8) + be(0x200_0000_0040, 8)),
        BROADCAST,
    ),
    "output": (
        OutputChunk(1440, 2048, (0xFFFF_FFFF_FFFF_FFFF, 7)),
        hand_frame("02:00:00:00:00:01", "02:5a:00:00:00:01", 0x80CB,
                   be(1440, 8) + be(2048, 8) + be(2, 2) + b"\xff" * 8 + be(7, 8)),
        HOST,
    ),
    "host_probe": (
        HostProbe(0xA1B2C3D4),
        hand_frame("ff:ff:ff:ff:ff:ff", "02:00:00:00:00:01", 0x80EE, b"\xa1\xb2\xc3\xd4"),
        BROADCAST,
    ),
}


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_bytes(name):
    payload, expected, dst = GOLDEN[name]
    src = HOST if dst != HOST else DEV
    raw = fr.build(dst, src, payload)
    assert raw == expected
    frame, back = fr.parse(expected)
    assert back == payload
    assert frame.dst == dst and frame.src == src


def test_golden_covers_every_ethertype():
    kinds = {fr.ethertype_of(p) for p, _, _ in GOLDEN.values()}
    assert kinds == set(EtherType)


def test_discovery_ethertype_offset_and_vendor_bytes():
    raw = fr.build(HOST, DEV, Discovery(DEV, DEV1, 0x1172, 0x385A))
    assert raw[12:14] == b"\x80\xef"
    assert raw[14 + 12:14 + 14] == b"\x11\x72"


def test_empty_payload_is_padded_to_minimum():
    raw = fr.encode_frame(Frame(DEV, HOST, EtherType.KERNEL_CMD, b""))
    assert len(raw) == 60
    assert raw[14:] == bytes(46)


def test_kernel_cmd_zero_address():
    body = fr.encode_payload(KernelCmd(0, 1))
    assert len(body) == 16
    assert body[:8] == bytes(8)


def test_full_size_pr_chunk_round_trips():
    chunk = PrChunk(0, 97_400_000, bytes(range(256)) * 4)
    raw = fr.build(BROADCAST, HOST, chunk)
    assert len(raw) == 14 + 18 + 1024
    assert fr.parse(raw)[1] == chunk


def test_mem_write_words_round_trip():
    mw = MemWrite(0, 0, 24, [1, 2, 3])
    assert mw.words == (1, 2, 3)
    assert fr.parse(fr.build(DEV, HOST, mw))[1] == mw


def test_truncated_and_foreign_frames():
    with pytest.raises(fr.TruncatedFrame):
        fr.decode_frame(bytes(59))
    ipv4 = bytes(12) + b"\x08\x00" + bytes(46)
    with pytest.raises(fr.UnknownEtherType) as exc:
        fr.decode_frame(ipv4)
    assert exc.value.raw == ipv4
    assert exc.value.ethertype == 0x0800


def test_oversized_payload():
    with pytest.raises(fr.OversizedPayload):
        fr.encode_frame(Frame(DEV, HOST, EtherType.PR_CHUNK, bytes(1501)))
    assert len(fr.encode_frame(Frame(DEV, HOST, EtherType.PR_CHUNK, bytes(1500)))) == 1514


@pytest.mark.parametrize("payload,field", [
    (PrChunk(0, 10, bytes(11)), "offset"),
    (PrChunk(0, 2000, bytes(1025)), "data"),
    (MemWrite(0, 4, 64, (1,)), "offset"),
    (MemWrite(0, 0, 8, (1, 2)), "offset"),
    (MemWrite(0, 0, 8 * 181, tuple(range(181))), "words"),
    (MemAck(0, 256), "status"),
    (Discovery(DEV, DEV1, 0x10000, 0), "vendor_id"),
    (PrAck(0, b"short"), "digest"),
    (KernelCmd(-1, 0), "address"),
])
def test_malformed_payload_names_field(payload, field):
    with pytest.raises(fr.MalformedPayload) as exc:
        fr.encode_payload(payload)
    assert exc.value.field == field


def test_decoder_rejects_inconsistent_lengths():
    body = fr._MEM_HDR.pack(0, 0, 16, 3) + bytes(16)
    with pytest.raises(fr.MalformedPayload):
        fr.decode_payload(EtherType.MEM_WRITE, body)
    body = fr._PR_HDR.pack(0, 100, 50) + bytes(10)
    with pytest.raises(fr.MalformedPayload):
        fr.decode_payload(EtherType.PR_CHUNK, body)


def test_mac_address():
    assert BROADCAST.is_broadcast()
    assert not DEV.is_broadcast()
    assert str(DEV) == "02:5a:00:00:00:01"
    assert MacAddress.parse("02-5A-00-00-00-01") == DEV
    assert MacAddress.from_int(0x025A00000001) == DEV
    with pytest.raises(ValueError):
        MacAddress(b"\x00" * 5)
    with pytest.raises(ValueError):
        MacAddress.parse("02:5a")


# -- CRC ---------------------------------------------------------------------------------

def crc32_bitwise(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def test_fcs_check_value():
    assert fr.fcs32(b"123456789") == 0xCBF43926
    assert crc32_bitwise(b"123456789") == 0xCBF43926
    assert fr.fcs32(b"") == 0


def test_fcs_residue_on_real_frame():
    raw = fr.build(BROADCAST, HOST, HostProbe(1))
    framed = fr.append_fcs(raw)
    assert len(framed) == 64
    assert fr.fcs32(framed) == fr.CRC32_RESIDUE
    assert fr.check_fcs(framed)
    bad = bytearray(framed)
    bad[20] ^= 1
    assert not fr.check_fcs(bytes(bad))


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=300))
def test_fcs_matches_bitwise_oracle(data):
    assert fr.fcs32(data) == crc32_bitwise(data)
    assert fr.check_fcs(fr.append_fcs(data))


# -- randomized round trips --------------------------------------------------------------

macs = st.binary(min_size=6, max_size=6).map(MacAddress)
u8 = st.integers(0, 0xFF)
u16 = st.integers(0, 0xFFFF)
u32 = st.integers(0, 0xFFFFFFFF)
u64 = st.integers(0, 2**64 - 1)
words = st.lists(u64, max_size=fr.MAX_WORDS_PER_FRAME).map(tuple)


@st.composite
def pr_chunks(draw):
    data = draw(st.binary(max_size=fr.PR_CHUNK_BYTES))
    offset = draw(st.integers(0, 2**63))
    total = draw(st.integers(offset + len(data), 2**64 - 1))
    return PrChunk(offset, total, data)


@st.composite
def mem_writes(draw):
    w = draw(words)
    offset = 8 * draw(st.integers(0, 2**58))
    total = draw(st.integers(offset + 8 * len(w), 2**64 - 1))
    return MemWrite(draw(u16), offset, total, w)


STRATEGIES = {
    "discovery": st.builds(Discovery, macs, macs, u16, u16),
    "host_probe": st.builds(HostProbe, u32),
    "pr_chunk": pr_chunks(),
    "pr_ack": st.builds(PrAck, u8, st.binary(min_size=32, max_size=32)),
    "mem_write": mem_writes(),
    "mem_ack": st.builds(MemAck, u16, u8),
    "kernel_cmd": st.builds(KernelCmd, u64, u64),
    "output": st.builds(OutputChunk, u64, u64, words),
}



def _make_round_trip_test(strategy):
    @settings(max_examples=ROUND_TRIPS, deadline=None)
    @given(strategy, macs, macs)
    def test(payload, dst, src):
        _round_trip(payload, dst, src)

    return test


for _name, _strategy in STRATEGIES.items():
    globals()[f"test_round_trip_{_name}"] = _make_round_trip_test(_strategy)


@pytest.mark.parametrize("name", sorted(CODECS))
def test_seeded_random_round_trips(name):
    rng = random.Random(name)
    for _ in range(1000):
        _round_trip(random_payload(name, rng), MacAddress(rng.randbytes(6)), MacAddress(rng.randbytes(6)))
