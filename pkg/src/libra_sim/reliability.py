"""Loss recovery, duplicate-write suppression and detection-migration failover."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .wire import RETRANSMIT, GradientPacket, PacketType, chunk_blob, join_blob

log = logging.getLogger(__name__)


class Verdict(Enum):
    FRESH = "fresh"
    DUPLICATE = "duplicate"


class RetransmitLimitExceeded(RuntimeError):
    pass


class MigrationError(RuntimeError):
    pass


class BloomFilter:
    """Plain k-hash Bloom filter over (worker_id, seq)."""

    def __init__(self, nbits: int = 1 << 20, nhashes: int = 4):
        self.nbits = nbits
        self.nhashes = nhashes
        self.bits = bytearray((nbits + 7) // 8)

    def _indices(self, worker_id: int, seq: int):
        digest = hashlib.blake2b(struct.pack(">HI", worker_id, seq), digest_size=16).digest()
        h1, h2 = struct.unpack(">QQ", digest)
        return [(h1 + i * h2) % self.nbits for i in range(self.nhashes)]

    def add(self, worker_id: int, seq: int) -> None:
        for i in self._indices(worker_id, seq):
            self.bits[i >> 3] |= 1 << (i & 7)

    def __contains__(self, item: tuple[int, int]) -> bool:
        return all(self.bits[i >> 3] & (1 << (i & 7)) for i in self._indices(*item))


@dataclass
class AggCopy:
    packet: GradientPacket
    dest: str
    sent_at: int
    retransmits: int = 0


class LocalAgent:
    """Switch-CPU side state: which (worker, seq) were aggregated, unacked results."""

    def __init__(self, mode: str = "exact", bloom_bits: int = 1 << 20, bloom_hashes: int = 4):
        if mode not in ("exact", "bloom"):
            raise ValueError(f"unknown seen-set mode {mode!r}")
        self.mode = mode
        self.seen: dict[tuple[int, int], int] = {}
        self.bloom = BloomFilter(bloom_bits, bloom_hashes) if mode == "bloom" else None
        self.unacked: dict[tuple[int, int], AggCopy] = {}
        self.false_drops = 0  # bloom mode: fresh writes rejected as duplicates

    def contains(self, worker_id: int, seq: int) -> bool:
        if self.bloom is not None:
            return (worker_id, seq) in self.bloom
        return (worker_id, seq) in self.seen

    def record(self, worker_id: int, seq: int, now: int) -> None:
        key = (worker_id, seq)
        if key in self.seen:
            raise AssertionError(f"(worker {worker_id}, seq {seq}) recorded twice")
        # exact map is kept in both modes; in bloom mode it only measures false positives
        self.seen[key] = now
        if self.bloom is not None:
            self.bloom.add(worker_id, seq)

    def gc(self, now: int, horizon: int) -> int:
        """Forget entries first seen more than ``horizon`` ticks ago."""
        stale = [k for k, t in self.seen.items() if now - t > horizon]
        for k in stale:
            del self.seen[k]
        return len(stale)

    def store_result(self, pkt: GradientPacket, dest: str, now: int) -> None:
        self.unacked[(pkt.worker_id, pkt.seq)] = AggCopy(pkt, dest, now)

    def ack_result(self, worker_id: int, seq: int) -> bool:
        return self.unacked.pop((worker_id, seq), None) is not None

    def export_seen(self) -> bytes:
        items = sorted(self.seen.items())
        out = [struct.pack(">I", len(items))]
        out.extend(struct.pack(">HIQ", w, s, t) for (w, s), t in items)
        return b"".join(out)

    def import_seen(self, blob: bytes) -> int:
        (n,) = struct.unpack_from(">I", blob)
        rec = struct.Struct(">HIQ")
        if len(blob) < 4 + n * rec.size:
            raise ValueError("truncated seen-set section")
        self.seen = {}
        for i in range(n):
            w, s, t = rec.unpack_from(blob, 4 + i * rec.size)
            self.seen[(w, s)] = t
            if self.bloom is not None:
                self.bloom.add(w, s)
        return 4 + n * rec.size


def dedup_check(agent: LocalAgent, pkt: GradientPacket) -> Verdict:
    """Classify a retransmit-flagged packet against the agent's seen-set."""
    if agent.contains(pkt.worker_id, pkt.seq):
        if agent.mode == "bloom" and (pkt.worker_id, pkt.seq) not in agent.seen:
            agent.false_drops += 1
        return Verdict.DUPLICATE
    return Verdict.FRESH


def on_ack_timeout(worker, seq: int, now: int) -> GradientPacket:
    """Re-emit an unacknowledged packet (gradient or pull) with the same seq and the retransmit bit."""
    entry = worker.inflight.get(seq) or worker.pending_pulls[seq]
    entry.retransmits += 1
    if entry.retransmits > worker.retransmit_cap:
        raise RetransmitLimitExceeded(
            f"worker {worker.worker_id} seq {seq}: {entry.retransmits - 1} retransmits without an ACK")
    entry.packet = entry.packet.with_flags(RETRANSMIT)
    entry.sent_at = now
    entry.timer += 1
    worker.retransmits += 1
    return entry.packet


# controller ---------------------------------------------------------------

class Health(Enum):
    HEALTHY = "healthy"
    ABOUT_TO_FAIL = "about_to_fail"


@dataclass
class FailurePredicate:
    latency_threshold: int = 40
    drop_rate_threshold: float = 0.05
    memory_threshold: int = 2 * 2**20
    missed_limit: int = 2


@dataclass
class Decision:
    tick: int
    switch: str
    health: Health
    reason: str


@dataclass
class MigrationEvent:
    tick: int
    source: str
    target: str
    reason: str
    slots: int
    seen_entries: int
    fragments: int


@dataclass
class StatsSample:
    tick: int
    latency: int
    packets_in: int
    drops: int
    memory: int


class ControllerState:
    """Heartbeats the active switch and decides when it is about to fail.

    ``send(dst, packet)`` is the controller's uplink; call ``on_stats`` when a
    STATS reply arrives.
    """

    def __init__(self, active: str, standbys: list[str], predicate: FailurePredicate | None = None,
                 send: Callable[[str, GradientPacket], None] | None = None, job_id: int = 0):
        self.active = active
        self.standbys = list(standbys)
        self.predicate = predicate or FailurePredicate()
        self.send = send or (lambda dst, pkt: None)
        self.job_id = job_id
        self.round = 0
        self.outstanding: dict[int, int] = {}  # heartbeat seq -> send tick
        self.missed = 0
        self.history: dict[str, list[StatsSample]] = {}
        self.decisions: list[Decision] = []
        self.migrations: list[MigrationEvent] = []
        self.failed = False  # set after a decision until migration resolves it

    def _decide(self, now: int, reason: str) -> list[Decision]:
        if self.failed:
            return []
        self.failed = True
        d = Decision(now, self.active, Health.ABOUT_TO_FAIL, reason)
        self.decisions.append(d)
        log.info("switch %s about to fail at tick %d: %s", self.active, now, reason)
        return [d]

    def heartbeat_round(self, now: int) -> list[Decision]:
        decisions = []
        if self.outstanding:
            self.missed += 1
            self.outstanding.clear()
            if self.missed >= self.predicate.missed_limit:
                decisions += self._decide(now, f"{self.missed} missed heartbeat replies")
        self.round += 1
        self.outstanding[self.round] = now
        self.send(self.active, GradientPacket(PacketType.HEARTBEAT, self.round, 0, job_id=self.job_id))
        return decisions

    def on_stats(self, source: str, seq: int, stats, now: int) -> list[Decision]:
        if source != self.active or seq not in self.outstanding:
            return []  # late reply to an earlier round, or from a retired switch
        sent = self.outstanding.pop(seq)
        self.missed = 0
        latency = now - sent
        hist = self.history.setdefault(source, [])
        prev = hist[-1] if hist else None
        sample = StatsSample(now, latency, stats.packets_in, stats.drops_observed, stats.memory_in_use)
        hist.append(sample)
        p = self.predicate
        if latency > p.latency_threshold:
            return self._decide(now, f"reply latency {latency} > {p.latency_threshold}")
        if prev is not None:
            arrivals = sample.packets_in - prev.packets_in
            drops = sample.drops - prev.drops
            if arrivals > 0 and drops / arrivals > p.drop_rate_threshold:
                return self._decide(now, f"drop rate {drops / arrivals:.3f} > {p.drop_rate_threshold}")
        if sample.memory > p.memory_threshold:
            return self._decide(now, f"memory {sample.memory} > {p.memory_threshold}")
        return []


def migrate(ctl: ControllerState, source, target, now: int, reason: str = "",
            reroute: Callable[[str], None] | None = None) -> MigrationEvent:
    """Move aggregation state from ``source`` to the preloaded ``target`` switch.

    Runs between pipeline passes: the snapshot is pulled, shipped as
    STATE_MIGRATE fragments, imported, and worker traffic is rerouted in one
    step.  Packets still heading to ``source`` are recovered by the workers'
    ordinary retransmit timers.
    """
    if not target.compatible_with(source):
        raise MigrationError(f"standby {target.name} does not match the layout/config of {source.name}")
    blob = source.export_state()
    fragments = chunk_blob(blob, job_id=ctl.job_id)
    target.import_state(join_blob(fragments))
    source.alive = False
    if target.name in ctl.standbys:
        ctl.standbys.remove(target.name)
    ctl.active = target.name
    ctl.outstanding.clear()
    ctl.missed = 0
    ctl.failed = False
    if reroute is not None:
        reroute(target.name)
    event = MigrationEvent(now, source.name, target.name, reason, source.bank.k,
                           len(source.agent.seen), len(fragments))
    ctl.migrations.append(event)
    log.info("migrated %s -> %s at tick %d (%d fragments)", source.name, target.name, now, len(fragments))
    return event
