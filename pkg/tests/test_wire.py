import math
import struct

import pytest
from hypothesis import given, strategies as st

from libra_sim.wire import (BLOB_CAPACITY, COLD, COLD_CAPACITY, ERROR_VERSION, HEADER_BYTES, MAX_PACKET_BYTES,
                            PAIR_CAPACITY, RESULT_CAPACITY, RETRANSMIT, GradientPacket, MalformedPacket, PacketType,
                            ack_for, chunk_blob, decode, encode, join_blob)

f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


def test_capacities():
    assert HEADER_BYTES == 16
    assert PAIR_CAPACITY == 22 and HEADER_BYTES + 22 * 8 == MAX_PACKET_BYTES
    assert COLD_CAPACITY == 14 and RESULT_CAPACITY == 14 and BLOB_CAPACITY == 176


def test_header_layout_is_bit_exact():
    pkt = GradientPacket(PacketType.GRADIENT, 0x01020304, 0x0506, ((7, 1.0),), RETRANSMIT, job_id=9)
    data = encode(pkt)
    assert data[0] == 9
    assert data[1] == (0 << 4) | 1
    assert data[2:6] == bytes([1, 2, 3, 4])
    assert data[6:8] == bytes([5, 6])
    assert data[8] == 1
    assert data[9:16] == bytes(7)
    assert data[16:] == struct.pack(">If", 7, 1.0)


def test_full_packet_is_192_bytes():
    pkt = GradientPacket(PacketType.GRADIENT, 1, 2, tuple((i, 0.5) for i in range(PAIR_CAPACITY)))
    assert len(encode(pkt)) == 192 == pkt.size
    with pytest.raises(MalformedPacket):
        encode(GradientPacket(PacketType.GRADIENT, 1, 2, tuple((i, 0.5) for i in range(PAIR_CAPACITY + 1))))


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**16 - 1),
       st.lists(st.tuples(st.integers(0, 2**32 - 1), f32), max_size=PAIR_CAPACITY, unique_by=lambda p: p[0]),
       st.booleans(), st.integers(0, 255))
def test_gradient_roundtrip(seq, worker, pairs, rt, job):
    pkt = GradientPacket(PacketType.GRADIENT, seq, worker, tuple(pairs), RETRANSMIT if rt else 0, job)
    back = decode(encode(pkt))
    assert back == pkt


@given(st.lists(st.tuples(st.integers(0, 2**64 - 1), f32), max_size=COLD_CAPACITY, unique_by=lambda p: p[0]))
def test_cold_roundtrip(pairs):
    pkt = GradientPacket(PacketType.GRADIENT, 3, 4, tuple(pairs), COLD)
    assert decode(encode(pkt)) == pkt and pkt.cold


def test_result_and_blob_roundtrip():
    res = GradientPacket(PacketType.AGG_RESULT, 5, 1, ((1, 0.25, 3), (2, math.nan, ERROR_VERSION)))
    back = decode(encode(res))
    assert back.pairs[0] == (1, 0.25, 3) and back.pairs[1][2] == ERROR_VERSION and math.isnan(back.pairs[1][1])
    blob = bytes(range(256)) * 3
    frags = chunk_blob(blob, job_id=2)
    assert all(len(encode(f)) <= MAX_PACKET_BYTES for f in frags)
    assert join_blob([decode(encode(f)) for f in reversed(frags)]) == blob
    with pytest.raises(MalformedPacket):
        join_blob(frags[1:])


def test_ack_mirrors_seq():
    pkt = GradientPacket(PacketType.GRADIENT, 77, 3, ((1, 1.0),), job_id=4)
    ack = ack_for(pkt)
    assert (ack.ptype, ack.seq, ack.worker_id, ack.job_id, ack.pairs) == (PacketType.ACK, 77, 3, 4, ())
    assert not pkt.with_flags(RETRANSMIT).cold and pkt.with_flags(RETRANSMIT).retransmit


@pytest.mark.parametrize("data", [
    b"\x00" * 8,  # truncated
    bytes(16)[:9] + b"\x01" + bytes(6),  # reserved byte set
    bytes([0, 0xF0]) + bytes(14),  # unknown type
    bytes([0, 0, 0, 0, 0, 1, 0, 1, 2]) + bytes(7) + struct.pack(">If", 1, 1.0),  # count says 2, body has 1
    bytes([0, 0, 0, 0, 0, 1, 0, 1, 2]) + bytes(7) + struct.pack(">IfIf", 1, 1.0, 1, 2.0),  # duplicate key
    bytes([0, 0, 0, 0, 0, 1, 0, 1, 1]) + bytes(7) + struct.pack(">If", 1, math.inf),  # non-finite
    bytes(200),  # oversize
])
def test_malformed(data):
    with pytest.raises(MalformedPacket):
        decode(data)


def test_encode_rejects_bad_fields():
    with pytest.raises(MalformedPacket):
        encode(GradientPacket(PacketType.GRADIENT, 2**32, 0))
    with pytest.raises(MalformedPacket):
        encode(GradientPacket(PacketType.GRADIENT, 0, 0, ((1, 1.0), (1, 2.0))))
    with pytest.raises(MalformedPacket):
        encode(GradientPacket(PacketType.ACK, 0, 0, flags=16))
