"""Bit-exact packet codec.

Header (16 bytes, big-endian)::

    0      job_id
    1      type (high nibble) | flags (low nibble)
    2..5   seq
    6..7   worker_id
    8      pair_count
    9..15  reserved, zero

Payload layout depends on the type and the COLD flag:

    GRADIENT, PULL, STATS    {u32 mapped_id, f32 value}        8 B, 22 per packet
    GRADIENT|COLD            {u64 raw_id, f32 value}          12 B, 14 per packet
    AGG_RESULT               {u32 mapped_id, f32 value, u32 version}  12 B, 14 per packet
    STATE_MIGRATE            pair_count opaque snapshot bytes
    ACK, HEARTBEAT           empty

PULL is capped at 14 ids so that its answer fits one AGG_RESULT.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum

MAX_PACKET_BYTES = 192
HEADER = struct.Struct(">BBIHB7x")
HEADER_BYTES = HEADER.size  # 16

RETRANSMIT = 0x1
COLD = 0x2

ERROR_VERSION = 0xFFFFFFFF


class PacketType(IntEnum):
    GRADIENT = 0
    ACK = 1
    AGG_RESULT = 2
    PULL = 3
    HEARTBEAT = 4
    STATS = 5
    STATE_MIGRATE = 6


class MalformedPacket(ValueError):
    pass


_PAIR = struct.Struct(">If")
_COLD_PAIR = struct.Struct(">Qf")
_RESULT = struct.Struct(">IfI")

PAIR_CAPACITY = (MAX_PACKET_BYTES - HEADER_BYTES) // _PAIR.size  # 22
COLD_CAPACITY = (MAX_PACKET_BYTES - HEADER_BYTES) // _COLD_PAIR.size  # 14
RESULT_CAPACITY = (MAX_PACKET_BYTES - HEADER_BYTES) // _RESULT.size  # 14
PULL_CAPACITY = RESULT_CAPACITY
BLOB_CAPACITY = MAX_PACKET_BYTES - HEADER_BYTES  # 176


def _layout(ptype: int, flags: int) -> tuple[struct.Struct | None, int]:
    if ptype == PacketType.GRADIENT:
        return (_COLD_PAIR, COLD_CAPACITY) if flags & COLD else (_PAIR, PAIR_CAPACITY)
    if ptype == PacketType.PULL:
        return (_COLD_PAIR, COLD_CAPACITY) if flags & COLD else (_PAIR, PULL_CAPACITY)
    if ptype == PacketType.STATS:
        return _PAIR, PAIR_CAPACITY
    if ptype == PacketType.AGG_RESULT:
        return _RESULT, RESULT_CAPACITY
    if ptype == PacketType.STATE_MIGRATE:
        return None, BLOB_CAPACITY
    return None, 0


def capacity(ptype: int, flags: int = 0) -> int:
    return _layout(ptype, flags)[1]


@dataclass(frozen=True)
class GradientPacket:
    ptype: PacketType
    seq: int
    worker_id: int
    pairs: tuple = ()
    flags: int = 0
    job_id: int = 0
    blob: bytes = b""

    @property
    def retransmit(self) -> bool:
        return bool(self.flags & RETRANSMIT)

    @property
    def cold(self) -> bool:
        return bool(self.flags & COLD)

    def with_flags(self, flags: int) -> "GradientPacket":
        return replace(self, flags=self.flags | flags)

    @property
    def payload_bytes(self) -> int:
        rec, _ = _layout(self.ptype, self.flags)
        if rec is None:
            return len(self.blob)
        return rec.size * len(self.pairs)

    @property
    def size(self) -> int:
        return HEADER_BYTES + self.payload_bytes


def encode(pkt: GradientPacket) -> bytes:
    if not 0 <= pkt.flags < 16:
        raise MalformedPacket(f"flags {pkt.flags} do not fit 4 bits")
    rec, cap = _layout(pkt.ptype, pkt.flags)
    count = len(pkt.blob) if rec is None else len(pkt.pairs)
    if count > cap:
        raise MalformedPacket(f"{pkt.ptype.name} carries {count} entries, capacity is {cap}")
    if pkt.ptype == PacketType.GRADIENT and len({p[0] for p in pkt.pairs}) != len(pkt.pairs):
        raise MalformedPacket("duplicate key within one gradient packet")
    try:
        parts = [HEADER.pack(pkt.job_id, (int(pkt.ptype) << 4) | pkt.flags, pkt.seq, pkt.worker_id, count)]
        if rec is None:
            parts.append(pkt.blob)
        else:
            parts.extend(rec.pack(*p) for p in pkt.pairs)
    except struct.error as exc:
        raise MalformedPacket(str(exc)) from exc
    data = b"".join(parts)
    if len(data) > MAX_PACKET_BYTES:
        raise MalformedPacket(f"packet is {len(data)} bytes, limit {MAX_PACKET_BYTES}")
    return data


def decode(data: bytes) -> GradientPacket:
    if len(data) < HEADER_BYTES:
        raise MalformedPacket("truncated header")
    if len(data) > MAX_PACKET_BYTES:
        raise MalformedPacket(f"packet is {len(data)} bytes, limit {MAX_PACKET_BYTES}")
    job_id, tf, seq, worker_id, count = HEADER.unpack_from(data)
    if any(data[9:16]):
        raise MalformedPacket("reserved header bytes are not zero")
    try:
        ptype = PacketType(tf >> 4)
    except ValueError as exc:
        raise MalformedPacket(f"unknown packet type {tf >> 4}") from exc
    flags = tf & 0xF
    rec, cap = _layout(ptype, flags)
    if count > cap:
        raise MalformedPacket(f"pair_count {count} exceeds capacity {cap}")
    body = data[HEADER_BYTES:]
    want = count if rec is None else count * rec.size
    if len(body) != want:
        raise MalformedPacket(f"payload is {len(body)} bytes, header implies {want}")
    if rec is None:
        return GradientPacket(ptype, seq, worker_id, (), flags, job_id, bytes(body))
    pairs = tuple(rec.iter_unpack(body))
    if ptype == PacketType.GRADIENT:
        if len({p[0] for p in pairs}) != len(pairs):
            raise MalformedPacket("duplicate key within one gradient packet")
        if not all(math.isfinite(p[1]) for p in pairs):
            raise MalformedPacket("non-finite gradient value")
    return GradientPacket(ptype, seq, worker_id, pairs, flags, job_id)


def ack_for(pkt: GradientPacket) -> GradientPacket:
    return GradientPacket(PacketType.ACK, pkt.seq, pkt.worker_id, job_id=pkt.job_id)


def chunk_blob(blob: bytes, worker_id: int = 0, job_id: int = 0) -> list[GradientPacket]:
    """Split a state snapshot into numbered STATE_MIGRATE packets."""
    return [GradientPacket(PacketType.STATE_MIGRATE, i, worker_id, job_id=job_id,
                           blob=blob[off:off + BLOB_CAPACITY])
            for i, off in enumerate(range(0, max(len(blob), 1), BLOB_CAPACITY))]


def join_blob(packets: list[GradientPacket]) -> bytes:
    ordered = sorted(packets, key=lambda p: p.seq)
    if [p.seq for p in ordered] != list(range(len(ordered))):
        raise MalformedPacket("missing STATE_MIGRATE fragments")
    return b"".join(p.blob for p in ordered)
