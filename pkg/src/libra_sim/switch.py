"""Programmable-switch model: register bank, pipeline passes, pulls and state export."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field

from .layout import LayoutMode, RegisterLayout
from .lns import LnsStats, LnsTables, LnsValue, float_to_lns, lns_add, lns_to_float
from .reliability import LocalAgent, Verdict, dedup_check
from .wire import ERROR_VERSION, GradientPacket, MalformedPacket, PacketType, ack_for, decode

SNAPSHOT_MAGIC = b"LIBRASNP"
_SNAP_HEADER = struct.Struct(">8sIHIBBQ")
_SNAP_ENTRY = struct.Struct(">IbhI")
BYTES_PER_SLOT = 4


@dataclass
class SwitchStats:
    packets_in: int = 0
    packets_out: int = 0
    recirculations: int = 0
    aggregated_pairs: int = 0
    cold_forwarded: int = 0
    memory_in_use: int = 0
    drops_observed: int = 0
    recirc_violations: int = 0
    duplicates: int = 0
    malformed: int = 0
    pulls: int = 0


class RegisterBank:
    """m registers x slots_per_register LNS accumulators with version counters."""

    def __init__(self, layout: RegisterLayout):
        self.layout = layout
        n = layout.num_slots
        self.sign = [0] * n
        self.logmag = [0] * n
        self.version = [0] * n
        self._cell = [layout.cell(i) for i in range(layout.k)]

    @property
    def k(self) -> int:
        return self.layout.k

    def cell_of(self, mapped_id: int) -> int:
        return self._cell[mapped_id]

    def read(self, mapped_id: int) -> tuple[LnsValue, int]:
        c = self._cell[mapped_id]
        return LnsValue(self.sign[c], self.logmag[c]), self.version[c]

    def add(self, mapped_id: int, value: LnsValue, tables: LnsTables, stats: LnsStats | None = None) -> None:
        c = self._cell[mapped_id]
        acc = lns_add(LnsValue(self.sign[c], self.logmag[c]), value, tables, stats)
        self.sign[c] = acc.sign
        self.logmag[c] = acc.logmag
        self.version[c] += 1


@dataclass
class ProcessResult:
    acks: list[GradientPacket] = field(default_factory=list)
    recirculations: int = 0
    forwarded: list[GradientPacket] = field(default_factory=list)
    verdict: Verdict | None = None
    dropped: bool = False


class Switch:
    def __init__(self, name: str, layout: RegisterLayout, tables: LnsTables, job_id: int = 0,
                 agent: LocalAgent | None = None, control_overhead_bytes: int = 130 * 1024):
        self.name = name
        self.layout = layout
        self.tables = tables
        self.job_id = job_id
        self.bank = RegisterBank(layout)
        self.agent = agent or LocalAgent()
        self.control_overhead_bytes = control_overhead_bytes
        self.stats = SwitchStats()
        self.lns_stats = LnsStats()
        self.alive = True
        self.fault_drop_prob = 0.0  # ingress drop probability set by a fault injector
        self.fault_rng = None

    # accounting -------------------------------------------------------------

    @property
    def memory_in_use(self) -> int:
        return BYTES_PER_SLOT * self.bank.k + self.tables.nbytes + self.control_overhead_bytes

    def report_stats(self) -> SwitchStats:
        s = SwitchStats(**asdict(self.stats))
        s.memory_in_use = self.memory_in_use
        return s

    def compatible_with(self, other: "Switch") -> bool:
        a, b = self.layout, other.layout
        return (a.m, a.slots_per_register, a.k, a.mode, a.seed) == (b.m, b.slots_per_register, b.k, b.mode, b.seed) \
            and self.tables.frac_bits == other.tables.frac_bits and self.job_id == other.job_id

    # data plane --------------------------------------------------------------

    def ingress(self, data: bytes | GradientPacket) -> GradientPacket | None:
        """Count an arrival and decode it; None when the packet is dropped."""
        self.stats.packets_in += 1
        if self.fault_drop_prob and self.fault_rng is not None and self.fault_rng.random() < self.fault_drop_prob:
            self.stats.drops_observed += 1
            return None
        if isinstance(data, GradientPacket):
            return data
        try:
            return decode(data)
        except MalformedPacket:
            self.stats.malformed += 1
            self.stats.drops_observed += 1
            return None

    def process_packet(self, data: bytes | GradientPacket, now: int = 0) -> ProcessResult:
        pkt = self.ingress(data)
        if pkt is None:
            return ProcessResult(dropped=True)
        return self.process_gradient(pkt, now)

    def process_gradient(self, pkt: GradientPacket, now: int = 0) -> ProcessResult:
        if pkt.ptype is not PacketType.GRADIENT:
            raise ValueError(f"process_gradient got a {pkt.ptype.name} packet")
        res = ProcessResult()
        if pkt.cold:
            self.stats.cold_forwarded += len(pkt.pairs)
            self.stats.packets_out += 1
            res.forwarded.append(pkt)
            return res
        k = self.bank.k
        if any(mid >= k for mid, _ in pkt.pairs):
            self.stats.malformed += 1
            self.stats.drops_observed += 1
            res.dropped = True
            return res
        if pkt.retransmit:
            res.verdict = dedup_check(self.agent, pkt)
            if res.verdict is Verdict.DUPLICATE:
                self.stats.duplicates += 1
                res.acks.append(ack_for(pkt))
                self.stats.packets_out += 1
                return res
        else:
            res.verdict = Verdict.FRESH
        res.recirculations = self._aggregate(pkt.pairs)
        self.agent.record(pkt.worker_id, pkt.seq, now)
        res.acks.append(ack_for(pkt))
        self.stats.packets_out += 1
        return res

    def _aggregate(self, pairs) -> int:
        """Apply pairs pass by pass, one access per register per pass."""
        reg = self.layout.register_fn()
        bank, tables, lstats = self.bank, self.tables, self.lns_stats
        pending = list(pairs)
        passes = 0
        while pending:
            used = set()
            deferred = []
            for mid, value in pending:
                r = reg(mid)
                if r in used:
                    deferred.append((mid, value))
                    continue
                used.add(r)
                bank.add(mid, float_to_lns(value, tables, lstats), tables, lstats)
            pending = deferred
            passes += 1
        recirc = max(0, passes - 1)
        self.stats.recirculations += recirc
        self.stats.aggregated_pairs += len(pairs)
        if recirc > 1:
            self.stats.recirc_violations += 1
        return recirc

    def handle_pull(self, pkt: GradientPacket, now: int = 0, mirror_to: str | None = None) -> list[GradientPacket]:
        """Answer a PULL with one AGG_RESULT echoing its seq; reads are non-destructive."""
        self.stats.pulls += 1
        out = []
        k = self.bank.k
        for mid, _ in pkt.pairs:
            if 0 <= mid < k:
                v, ver = self.bank.read(mid)
                out.append((mid, lns_to_float(v, self.tables), ver))
            else:
                out.append((mid, math.nan, ERROR_VERSION))
        result = GradientPacket(PacketType.AGG_RESULT, pkt.seq, pkt.worker_id, tuple(out), job_id=self.job_id)
        self.agent.store_result(result, mirror_to or "", now)
        self.stats.packets_out += 1
        return [result]

    def read_all(self) -> dict[int, tuple[float, int]]:
        out = {}
        for mid in range(self.bank.k):
            v, ver = self.bank.read(mid)
            out[mid] = (lns_to_float(v, self.tables), ver)
        return out

    def write_counts(self) -> list[int]:
        return [self.bank.read(mid)[1] for mid in range(self.bank.k)]

    # state migration ------------------------------------------------------------

    def _header(self) -> bytes:
        lay = self.layout
        return _SNAP_HEADER.pack(SNAPSHOT_MAGIC, lay.k, lay.m, lay.slots_per_register,
                                 self.tables.frac_bits, 1 if lay.mode is LayoutMode.RANDOM else 0, lay.seed)

    def export_state(self) -> bytes:
        parts = [self._header()]
        for mid in range(self.bank.k):
            v, ver = self.bank.read(mid)
            parts.append(_SNAP_ENTRY.pack(mid, v.sign, v.logmag, ver))
        parts.append(self.agent.export_seen())
        return b"".join(parts)

    def import_state(self, blob: bytes) -> None:
        if blob[:_SNAP_HEADER.size] != self._header():
            raise ValueError(f"snapshot header does not match the layout/config of {self.name}")
        off = _SNAP_HEADER.size
        k = self.bank.k
        bank = self.bank
        for i in range(k):
            mid, sign, logmag, ver = _SNAP_ENTRY.unpack_from(blob, off)
            off += _SNAP_ENTRY.size
            if mid != i:
                raise ValueError(f"snapshot entry {i} carries mapped_id {mid}")
            c = bank.cell_of(mid)
            bank.sign[c], bank.logmag[c], bank.version[c] = sign, logmag, ver
        used = self.agent.import_seen(blob[off:])
        if off + used != len(blob):
            raise ValueError("trailing bytes after snapshot")


STATS_FIELDS = tuple(SwitchStats.__dataclass_fields__)


def stats_packet(stats: SwitchStats, seq: int, job_id: int = 0) -> GradientPacket:
    """Heartbeat reply; counters travel as (field index, value) pairs."""
    pairs = tuple((i, float(getattr(stats, name))) for i, name in enumerate(STATS_FIELDS))
    return GradientPacket(PacketType.STATS, seq, 0, pairs, job_id=job_id)


def stats_from_packet(pkt: GradientPacket) -> SwitchStats:
    # values pass through binary32, exact for counters below 2**24
    return SwitchStats(**{STATS_FIELDS[i]: int(v) for i, v in pkt.pairs if i < len(STATS_FIELDS)})
