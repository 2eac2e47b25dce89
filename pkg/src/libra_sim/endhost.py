"""Worker and parameter-server state machines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .core import as_float32
from .layout import RegisterLayout, package_gradients, package_sequential
from .wire import (COLD, COLD_CAPACITY, ERROR_VERSION, PAIR_CAPACITY, PULL_CAPACITY, GradientPacket,
                   PacketType, ack_for)

SWITCH = "switch"  # address alias; the network resolves it to the active switch
EXACT_SHIFT = 149  # every binary32 is an integer multiple of 2**-149


class WindowFull(RuntimeError):
    """Backpressure: pushing the batch would exceed the in-flight window."""


class PartitionError(ValueError):
    pass


def to_exact(x: float) -> int:
    return int(x * 2.0**EXACT_SHIFT)


def from_exact(i: int) -> float:
    return i / (1 << EXACT_SHIFT)


def exact_sum(values: Iterable[float]) -> float:
    return from_exact(sum(to_exact(v) for v in values))


def split_hot_cold(batch: Sequence[tuple[int, float]], index_map: Mapping[int, int]):
    """Partition a batch into hot (mapped_id, value) and cold (raw_id, value) pairs; values become binary32."""
    hot, cold = [], []
    for raw, value in batch:
        value = as_float32(value)
        mid = index_map.get(raw)
        if mid is None:
            cold.append((raw, value))
        else:
            hot.append((mid, value))
    return hot, cold


@dataclass
class InFlight:
    packet: GradientPacket
    dest: str
    sent_at: int
    retransmits: int = 0
    timer: int = 0


class Worker:
    def __init__(self, worker_id: int, index_map: Mapping[int, int], layout: RegisterLayout | None, *,
                 job_id: int = 0, num_ps: int = 1, window_cap: int = 256, retransmit_cap: int = 16,
                 packing: str = "layout", capacity: int = PAIR_CAPACITY):
        if packing not in ("layout", "sequential"):
            raise ValueError(f"unknown packing {packing!r}")
        self.worker_id = worker_id
        self.index_map = dict(index_map)
        self.inverse = {mid: raw for raw, mid in self.index_map.items()}
        self.layout = layout
        self.job_id = job_id
        self.num_ps = num_ps
        self.window_cap = window_cap
        self.retransmit_cap = retransmit_cap
        self.packing = packing
        self.capacity = capacity
        self.next_seq = 0
        self.inflight: dict[int, InFlight] = {}
        self.pending_pulls: dict[int, InFlight] = {}
        self.last_seen_version: dict[int, int] = {}
        self.pulled: dict[int, float] = {}
        self.version_regressions = 0
        self.retransmits = 0
        self.acked = 0
        self.pushed_pairs = 0
        self.hot_pairs = 0
        self.cold_pairs = 0
        self.packets_sent = 0
        self.pull_failures = 0

    def _seq(self) -> int:
        seq = self.next_seq
        if seq >= 2**32:
            raise OverflowError(f"worker {self.worker_id} exhausted its 32-bit sequence space")
        self.next_seq += 1
        return seq

    def package(self, batch: Sequence[tuple[int, float]]) -> list[GradientPacket]:
        """Split a batch and build (unsequenced) hot and cold packets."""
        hot, cold = split_hot_cold(batch, self.index_map)
        groups = []
        if hot:
            hot.sort(key=lambda p: p[0])
            if self.packing == "layout" and self.layout is not None:
                packed = package_gradients(hot, self.layout.m, self.capacity, self.layout.register_fn())
            else:
                packed = package_sequential(hot, self.capacity)
            groups += [(tuple(p), 0) for p in packed.packets]
        if cold:
            by_ps: dict[int, list] = {}
            for raw, value in sorted(cold):
                by_ps.setdefault(raw % self.num_ps, []).append((raw, value))
            for ps in sorted(by_ps):
                pairs = by_ps[ps]
                groups += [(tuple(pairs[i:i + COLD_CAPACITY]), COLD) for i in range(0, len(pairs), COLD_CAPACITY)]
        self.hot_pairs += len(hot)
        self.cold_pairs += len(cold)
        self.pushed_pairs += len(batch)
        return [GradientPacket(PacketType.GRADIENT, 0, self.worker_id, pairs, flags, self.job_id)
                for pairs, flags in groups]

    def push_batch(self, batch: Sequence[tuple[int, float]], now: int) -> list[tuple[str, GradientPacket]]:
        """Package, sequence and register a batch; raises WindowFull before emitting anything."""
        hot, cold = split_hot_cold(batch, self.index_map)
        estimate = -(-len(hot) // self.capacity) + -(-len(cold) // COLD_CAPACITY)
        if len(self.inflight) + estimate > self.window_cap and self.inflight:
            raise WindowFull(f"worker {self.worker_id}: {len(self.inflight)} in flight, window {self.window_cap}")
        out = []
        for pkt in self.package(batch):
            pkt = GradientPacket(pkt.ptype, self._seq(), pkt.worker_id, pkt.pairs, pkt.flags, pkt.job_id)
            self.inflight[pkt.seq] = InFlight(pkt, SWITCH, now)
            self.packets_sent += 1
            out.append((SWITCH, pkt))
        return out

    def on_ack(self, seq: int) -> bool:
        if self.inflight.pop(seq, None) is None:
            return False  # stale duplicate ACK
        self.acked += 1
        return True

    @property
    def idle(self) -> bool:
        return not self.inflight and not self.pending_pulls

    # pulls ---------------------------------------------------------------

    def start_pull(self, mapped_ids: Sequence[int], now: int) -> list[tuple[str, GradientPacket]]:
        out = []
        for i in range(0, len(mapped_ids), PULL_CAPACITY):
            chunk = tuple((mid, 0.0) for mid in mapped_ids[i:i + PULL_CAPACITY])
            pkt = GradientPacket(PacketType.PULL, self._seq(), self.worker_id, chunk, job_id=self.job_id)
            self.pending_pulls[pkt.seq] = InFlight(pkt, SWITCH, now)
            out.append((SWITCH, pkt))
        return out

    def on_agg_result(self, pkt: GradientPacket) -> list[tuple[str, GradientPacket]]:
        if self.pending_pulls.pop(pkt.seq, None) is not None:
            for mid, value, version in pkt.pairs:
                if version == ERROR_VERSION:
                    self.pull_failures += 1
                    continue
                if version < self.last_seen_version.get(mid, 0):
                    self.version_regressions += 1
                self.last_seen_version[mid] = version
                self.pulled[mid] = value
        # always acknowledge so the switch agent can drop its copy
        return [(SWITCH, ack_for(pkt))]

    def switch_view(self) -> dict[int, float]:
        return dict(self.pulled)


class ParameterServer:
    """Exact cold-parameter aggregation on a CPU host."""

    def __init__(self, ps_id: int = 0, job_id: int = 0, hot_ids: Iterable[int] = ()):
        self.ps_id = ps_id
        self.job_id = job_id
        self.store: dict[int, int] = {}
        self.writes: dict[int, int] = {}
        self.seen: set[tuple[int, int]] = set()
        self.hot_ids = frozenset(hot_ids)
        self.duplicates = 0
        self.anomalies = 0
        self.hot_pairs_received = 0
        self.payload_bytes = 0
        self.packets_in = 0

    def apply(self, pkt: GradientPacket) -> GradientPacket:
        if pkt.ptype is not PacketType.GRADIENT or not pkt.cold:
            raise ValueError("parameter server accepts cold GRADIENT packets only")
        self.packets_in += 1
        self.payload_bytes += pkt.payload_bytes
        key = (pkt.worker_id, pkt.seq)
        if key in self.seen:
            if pkt.retransmit:
                self.duplicates += 1
            else:
                self.anomalies += 1
            return ack_for(pkt)
        self.seen.add(key)
        store, writes, hot = self.store, self.writes, self.hot_ids
        for raw, value in pkt.pairs:
            if raw in hot:
                self.hot_pairs_received += 1
            store[raw] = store.get(raw, 0) + to_exact(value)
            writes[raw] = writes.get(raw, 0) + 1
        return ack_for(pkt)

    def pull(self, raw_ids: Iterable[int] | None = None) -> dict[int, float]:
        ids = self.store.keys() if raw_ids is None else raw_ids
        return {raw: from_exact(self.store.get(raw, 0)) for raw in ids}


def ps_apply(ps: ParameterServer, pkt: GradientPacket) -> GradientPacket:
    return ps.apply(pkt)


def reconstruct_model(inverse_map: Mapping[int, int], switch_view: Mapping[int, float],
                      ps_views: Iterable[Mapping[int, float]] | Mapping[int, float]) -> dict[int, float]:
    """Merge hot (mapped ids) and cold (raw ids) aggregation results by raw id."""
    model = {inverse_map[mid]: value for mid, value in switch_view.items()}
    if isinstance(ps_views, Mapping):
        ps_views = [ps_views]
    for view in ps_views:
        for raw, value in view.items():
            if raw in model:
                raise PartitionError(f"raw_id {raw} was aggregated both on the switch and on a PS")
            model[raw] = value
    return model


def sgd_step(params: dict[int, float], grads: Mapping[int, float], lr: float) -> dict[int, float]:
    for raw, g in grads.items():
        params[raw] = params.get(raw, 0.0) - lr * g
    return params
