"""Experiment pipeline: sample, identify, lay out, simulate, compare against the oracle."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from ..core import EventLoop, SimConfig, as_float32, validate_config
from ..endhost import SWITCH, ParameterServer, PartitionError, Worker, WindowFull, from_exact, reconstruct_model, to_exact
from ..hotid import HotSet, count_frequencies, identification_precision, select_hot
from ..layout import LayoutMode, RegisterLayout
from ..lns import build_tables
from ..reliability import (ControllerState, FailurePredicate, LocalAgent, MigrationError, RetransmitLimitExceeded,
                           Verdict, migrate, on_ack_timeout)
from ..switch import Switch, stats_from_packet, stats_packet
from ..wire import RETRANSMIT, PacketType, decode
from .network import Network
from .report import RunReport
from .workload import Batch, iter_pairs, sample_batches

log = logging.getLogger(__name__)

BYTES_PER_FLOAT = 4


class InvariantBreach(RuntimeError):
    pass


class ScenarioKind(str, Enum):
    BASELINE_PS_ONLY = "BASELINE_PS_ONLY"
    LIBRA = "LIBRA"
    RANDOM_LAYOUT = "RANDOM_LAYOUT"
    LOSSY = "LOSSY"
    FAILOVER = "FAILOVER"


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind
    loss: float | None = None
    kill_tick: int | None = None

    @property
    def name(self) -> str:
        if self.kind is ScenarioKind.LOSSY:
            return f"LOSSY({self.loss:g})"
        if self.kind is ScenarioKind.FAILOVER:
            return f"FAILOVER({self.kill_tick})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        m = re.fullmatch(r"\s*([A-Za-z_]+)\s*(?:\(\s*([^)]*)\s*\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse scenario {text!r}")
        try:
            kind = ScenarioKind(m.group(1).upper())
        except ValueError:
            raise ValueError(f"unknown scenario {m.group(1)!r}; expected one of "
                             f"{', '.join(k.value for k in ScenarioKind)}") from None
        arg = m.group(2)
        if kind is ScenarioKind.LOSSY:
            if arg is None:
                raise ValueError("LOSSY needs a loss probability, e.g. LOSSY(0.001)")
            p = float(arg)
            if not 0 <= p < 1:
                raise ValueError("loss probability must be in [0, 1)")
            return cls(kind, loss=p)
        if kind is ScenarioKind.FAILOVER:
            if arg is None:
                raise ValueError("FAILOVER needs a kill tick, e.g. FAILOVER(2000)")
            return cls(kind, kill_tick=int(arg))
        if arg:
            raise ValueError(f"{kind.value} takes no argument")
        return cls(kind)


# oracle ------------------------------------------------------------------------

@dataclass
class Oracle:
    sums: dict[int, int]  # exact, in units of 2**-149
    occurrences: Counter
    max_abs: dict[int, float]

    @classmethod
    def of(cls, batches: Sequence[Batch]) -> "Oracle":
        sums: dict[int, int] = {}
        occ: Counter = Counter()
        mx: dict[int, float] = {}
        for b in batches:
            for raw, v in b.pairs:
                v = as_float32(v)
                sums[raw] = sums.get(raw, 0) + to_exact(v)
                occ[raw] += 1
                a = abs(v)
                if a > mx.get(raw, 0.0):
                    mx[raw] = a
        return cls(sums, occ, mx)

    def value(self, raw: int) -> float:
        return from_exact(self.sums.get(raw, 0))

    def tolerance(self, raw: int, rel: float = 0.005) -> float:
        return self.occurrences.get(raw, 0) * rel * self.max_abs.get(raw, 0.0)


def identify(cfg: SimConfig, batches: Sequence[Batch], seed: int, sample_rate: float | None = None) -> HotSet:
    sample = sample_batches(list(batches), cfg.sample_rate if sample_rate is None else sample_rate, seed)
    profile = count_frequencies(iter_pairs(sample))
    return select_hot(profile, cfg.traffic_target, cfg.memory_fraction, chip_bytes=cfg.chip_bytes, max_k=cfg.hot_k)


def dense_volume(n_params: int, num_workers: int, iterations: int, bytes_per_param: int = BYTES_PER_FLOAT) -> int:
    """Gradient bytes a dense-streaming aggregation sends: every worker ships the full model each iteration."""
    return n_params * bytes_per_param * num_workers * iterations


def precision_sweep(cfg: SimConfig, batches: Sequence[Batch], rates: Sequence[float], seeds: Sequence[int]):
    """Rows (rate, seed, k, precision) of sampled vs full-trace hot-set identification."""
    full = identify(cfg, batches, 0, sample_rate=1.0)
    rows = []
    for rate in rates:
        for s in seeds:
            sampled = identify(cfg, batches, s, sample_rate=rate)
            rows.append((rate, s, full.k, identification_precision(full, sampled)))
    return rows


# simulation ---------------------------------------------------------------------

class _Sim:
    def __init__(self, cfg: SimConfig, scenario: Scenario, hot: HotSet, layout: RegisterLayout,
                 batches: Sequence[Batch], seed: int):
        self.cfg = cfg
        self.scenario = scenario
        self.batches = batches
        self.loop = EventLoop()
        loss = scenario.loss if scenario.kind is ScenarioKind.LOSSY else cfg.loss_rate
        self.net = Network(self.loop, cfg.link_delay, loss, seed)
        tables = build_tables(cfg.frac_bits)
        self.switches = {}
        for name in ("sw0", "sw1"):
            agent = LocalAgent(cfg.seen_set_mode, cfg.bloom_bits, cfg.bloom_hashes)
            self.switches[name] = Switch(name, layout, tables, cfg.job_id, agent, cfg.control_overhead_bytes)
            self.net.attach(name, self._switch_handler(name))
        self.net.aliases[SWITCH] = "sw0"
        packing = "sequential" if layout.mode is LayoutMode.RANDOM else "layout"
        n_workers = max([b.worker for b in batches], default=-1) + 1
        n_workers = max(n_workers, cfg.num_workers)
        self.workers = [Worker(w, hot.index_map, layout, job_id=cfg.job_id, num_ps=cfg.num_ps,
                               window_cap=cfg.window_cap, retransmit_cap=cfg.retransmit_cap, packing=packing)
                        for w in range(n_workers)]
        self.backlog: list[list[Batch]] = [[] for _ in self.workers]
        for w in range(n_workers):
            self.net.attach(f"w{w}", self._worker_handler(w))
        hot_raw = set(hot.ranked_ids)
        self.ps = [ParameterServer(j, cfg.job_id, hot_raw) for j in range(cfg.num_ps)]
        for j in range(cfg.num_ps):
            self.net.attach(f"ps{j}", self._ps_handler(j))
        pred = FailurePredicate(cfg.latency_threshold, cfg.drop_rate_threshold, cfg.memory_threshold, cfg.missed_replies)
        self.ctl = ControllerState("sw0", ["sw1"], pred, lambda dst, pkt: self.net.send("ctl", dst, pkt), cfg.job_id)
        self.net.attach("ctl", self._ctl_handler)
        self.k = hot.k
        self.recirc_hist: Counter = Counter()
        self.pending_batches = len(batches)
        self.pull_started = False
        self.done = False
        self.done_tick: int | None = None

    @property
    def active(self) -> Switch:
        return self.switches[self.ctl.active]

    # workers ------------------------------------------------------------------

    def _arm(self, w: int, seq: int, gen: int) -> None:
        self.loop.after(self.cfg.ack_timeout, self._timeout, w, seq, gen)

    def _timeout(self, w: int, seq: int, gen: int) -> None:
        worker = self.workers[w]
        entry = worker.inflight.get(seq) or worker.pending_pulls.get(seq)
        if entry is None or entry.timer != gen:
            return
        try:
            pkt = on_ack_timeout(worker, seq, self.loop.now)
        except RetransmitLimitExceeded as exc:
            raise InvariantBreach(str(exc)) from exc
        self.net.send(f"w{w}", entry.dest, pkt)
        self._arm(w, seq, entry.timer)

    def _push(self, w: int, batch: Batch) -> bool:
        worker = self.workers[w]
        try:
            out = worker.push_batch(batch.pairs, self.loop.now)
        except WindowFull:
            return False
        for dst, pkt in out:
            self.net.send(f"w{w}", dst, pkt)
            self._arm(w, pkt.seq, 0)
        self.pending_batches -= 1
        return True

    def _batch_due(self, w: int, batch: Batch) -> None:
        if self.backlog[w] or not self._push(w, batch):
            self.backlog[w].append(batch)

    def _drain(self, w: int) -> None:
        q = self.backlog[w]
        while q and self._push(w, q[0]):
            q.pop(0)

    def _worker_handler(self, w: int):
        worker = self.workers[w]
        name = f"w{w}"

        def handle(data: bytes, src: str) -> None:
            pkt = decode(data)
            if pkt.ptype is PacketType.ACK:
                if worker.on_ack(pkt.seq):
                    self._drain(w)
            elif pkt.ptype is PacketType.AGG_RESULT:
                for _, ack in worker.on_agg_result(pkt):
                    self.net.send(name, src, ack)
            else:
                raise InvariantBreach(f"worker {w} received unexpected {pkt.ptype.name}")
            self._progress()
        return handle

    def _progress(self) -> None:
        if self.done or self.pending_batches or any(not w.idle for w in self.workers):
            return
        if not self.pull_started:
            self.pull_started = True
            puller = self.workers[0]
            for dst, pkt in puller.start_pull(list(range(self.k)), self.loop.now):
                self.net.send("w0", dst, pkt)
                self._arm(0, pkt.seq, 0)
            if puller.pending_pulls:
                return
        self.done = True
        self.done_tick = self.loop.now

    # switches -----------------------------------------------------------------

    def _switch_handler(self, name: str):
        sw = self.switches[name]

        def handle(data: bytes, src: str) -> None:
            if not sw.alive:
                return  # a killed switch is silent
            pkt = sw.ingress(data)
            if pkt is None:
                return
            now = self.loop.now
            t = pkt.ptype
            if t is PacketType.GRADIENT:
                res = sw.process_gradient(pkt, now)
                if res.verdict is Verdict.FRESH:
                    self.recirc_hist[res.recirculations] += 1
                for ack in res.acks:
                    self.net.send(name, f"w{pkt.worker_id}", ack)
                for fwd in res.forwarded:
                    self.net.send(name, f"ps{fwd.pairs[0][0] % len(self.ps)}", fwd)
            elif t is PacketType.PULL:
                for result in sw.handle_pull(pkt, now, mirror_to=src):
                    self.net.send(name, src, result)
                    self.loop.after(self.cfg.ack_timeout, self._result_timeout, name, (result.worker_id, result.seq), 0)
            elif t is PacketType.ACK:
                sw.agent.ack_result(pkt.worker_id, pkt.seq)
            elif t is PacketType.HEARTBEAT:
                self.net.send(name, src, stats_packet(sw.report_stats(), pkt.seq, sw.job_id))
            else:
                sw.stats.malformed += 1
        return handle

    def _result_timeout(self, name: str, key: tuple[int, int], gen: int) -> None:
        sw = self.switches[name]
        copy = sw.agent.unacked.get(key)
        if copy is None or copy.retransmits != gen or not sw.alive:
            return
        copy.retransmits += 1
        if copy.retransmits > self.cfg.retransmit_cap:
            raise InvariantBreach(f"{name}: AGG_RESULT for worker {key[0]} seq {key[1]} never acknowledged")
        self.net.send(name, copy.dest, copy.packet.with_flags(RETRANSMIT))
        self.loop.after(self.cfg.ack_timeout, self._result_timeout, name, key, copy.retransmits)

    # parameter servers / controller ----------------------------------------------

    def _ps_handler(self, j: int):
        ps = self.ps[j]

        def handle(data: bytes, src: str) -> None:
            pkt = decode(data)
            ack = ps.apply(pkt)
            self.net.send(f"ps{j}", f"w{pkt.worker_id}", ack)
        return handle

    def _ctl_handler(self, data: bytes, src: str) -> None:
        pkt = decode(data)
        if pkt.ptype is PacketType.STATS:
            self._act(self.ctl.on_stats(src, pkt.seq, stats_from_packet(pkt), self.loop.now))

    def _act(self, decisions) -> None:
        for d in decisions:
            if not self.ctl.standbys:
                raise InvariantBreach(f"switch {d.switch} is failing ({d.reason}) and no standby is left")
            target = self.switches[self.ctl.standbys[0]]
            try:
                migrate(self.ctl, self.switches[d.switch], target, self.loop.now, d.reason,
                        reroute=lambda t: self.net.aliases.__setitem__(SWITCH, t))
            except MigrationError as exc:
                raise InvariantBreach(str(exc)) from exc

    def _heartbeat(self) -> None:
        if self.done:
            return
        self._act(self.ctl.heartbeat_round(self.loop.now))
        self.loop.after(self.cfg.heartbeat_interval, self._heartbeat)

    def _kill(self) -> None:
        sw = self.active
        sw.alive = False
        log.info("killed %s at tick %d", sw.name, self.loop.now)

    # driver ----------------------------------------------------------------------

    def run(self) -> None:
        for b in self.batches:
            self.loop.at(b.tick, self._batch_due, b.worker, b)
        if self.scenario.kind is ScenarioKind.FAILOVER:
            self.loop.at(self.scenario.kill_tick, self._kill)
        self.loop.at(0, self._heartbeat)
        self.loop.at(0, self._progress)
        self.loop.run()
        if not self.done:
            raise InvariantBreach("simulation stalled before every batch was acknowledged")


def _layout_for(cfg: SimConfig, scenario: Scenario, k: int, seed: int) -> RegisterLayout:
    mode = LayoutMode.RANDOM if scenario.kind is ScenarioKind.RANDOM_LAYOUT else LayoutMode.HEAT_BASED
    return RegisterLayout(cfg.num_registers, cfg.slots_per_register, k, mode, seed)


def run_experiment(cfg: SimConfig, workload: Sequence[Batch], scenario: Scenario | str,
                   seed: int | None = None, hot: HotSet | None = None) -> RunReport:
    """Run one scenario end to end; invariant breaches abort with a partial report."""
    if isinstance(scenario, str):
        scenario = Scenario.parse(scenario)
    validate_config(cfg)
    seed = cfg.rng_seed if seed is None else seed
    cfg = cfg.replace(rng_seed=seed)
    report = RunReport(scenario.name, seed, cfg.digest())
    S = report.summary
    batches = sorted(workload, key=lambda b: (b.tick, b.worker))
    S["batches"] = len(batches)
    S["pairs"] = sum(len(b.pairs) for b in batches)
    if scenario.kind is ScenarioKind.BASELINE_PS_ONLY:
        hot = HotSet([], [], S["pairs"])
    elif hot is None:
        hot = identify(cfg, batches, seed) if batches else HotSet([], [], 0)
    S["hot_k"] = hot.k
    S["coverage"] = hot.coverage
    S["coverage_clamped"] = hot.clamped
    layout = _layout_for(cfg, scenario, hot.k, seed)
    sim = _Sim(cfg, scenario, hot, layout, batches, seed)
    try:
        sim.run()
    except (InvariantBreach, PartitionError, AssertionError) as exc:
        report.aborted = f"tick {sim.loop.now}: {exc}"
        log.error("run aborted: %s", report.aborted)
    _collect(report, sim, hot, batches)
    return report


def _collect(report: RunReport, sim: _Sim, hot: HotSet, batches: Sequence[Batch]) -> None:
    S = report.summary
    sw = sim.active
    sw_writes = sum(sum(s.bank.version) for s in sim.switches.values())
    S["end_tick"] = sim.loop.now
    S["switch_writes"] = sum(sw.bank.version)
    S["switch_writes_all"] = sw_writes
    pkts = sum(sim.recirc_hist.values())
    S["hot_packets"] = pkts
    S["recirculations_per_packet"] = (sum(r * n for r, n in sim.recirc_hist.items()) / pkts) if pkts else 0.0
    S["recirc_violations"] = sum(s.stats.recirc_violations for s in sim.switches.values())
    S["ps_gradient_payload_bytes"] = sum(p.payload_bytes for p in sim.ps)
    S["ps_hot_pairs"] = sum(p.hot_pairs_received for p in sim.ps)
    S["cold_pairs_pushed"] = sum(w.cold_pairs for w in sim.workers)
    S["hot_pairs_pushed"] = sum(w.hot_pairs for w in sim.workers)
    S["packets_sent"] = sim.net.sent
    S["packets_lost"] = sim.net.lost
    S["retransmits"] = sum(w.retransmits for w in sim.workers)
    S["switch_duplicates"] = sum(s.stats.duplicates for s in sim.switches.values())
    S["ps_duplicates"] = sum(p.duplicates for p in sim.ps)
    S["ps_anomalies"] = sum(p.anomalies for p in sim.ps)
    S["bloom_false_drops"] = sum(s.agent.false_drops for s in sim.switches.values())
    S["switch_memory_bytes"] = sw.memory_in_use
    S["migrations"] = len(sim.ctl.migrations)
    S["active_switch"] = sw.name
    report.recirculations = dict(sim.recirc_hist)
    report.migrations = [(m.tick, m.source, m.target, m.reason, m.slots, m.seen_entries, m.fragments)
                         for m in sim.ctl.migrations]
    report.retransmits = [(w.worker_id, w.packets_sent, w.retransmits, w.acked, w.pull_failures,
                           w.version_regressions) for w in sim.workers]
    if report.aborted:
        return

    oracle = Oracle.of(batches)
    puller = sim.workers[0]
    view = puller.switch_view()
    if len(view) != hot.k:
        report.violations.append(f"pulled {len(view)} of {hot.k} hot parameters")
    try:
        model = reconstruct_model(puller.inverse, view, [p.pull() for p in sim.ps])
    except PartitionError as exc:
        report.aborted = str(exc)
        return
    report.model = model
    report.hot_state = {mid: (sw.bank.read(mid)[0].sign, sw.bank.read(mid)[0].logmag) for mid in range(hot.k)}

    # per-key write counts: switch versions for hot keys, PS writes for cold keys
    write_mismatch = 0
    for mid, raw in enumerate(hot.ranked_ids):
        if sw.bank.read(mid)[1] != oracle.occurrences.get(raw, 0):
            write_mismatch += 1
    ps_writes: Counter = Counter()
    for p in sim.ps:
        ps_writes.update(p.writes)
    hot_raw = set(hot.ranked_ids)
    for raw, n in oracle.occurrences.items():
        if raw not in hot_raw and ps_writes.get(raw, 0) != n:
            write_mismatch += 1
    S["write_count_mismatches"] = write_mismatch
    if write_mismatch:
        report.violations.append(f"{write_mismatch} keys with write count != batch occurrences")

    # values against the exact oracle
    cold_mismatch = 0
    ps_exact: dict[int, int] = {}
    for p in sim.ps:
        ps_exact.update(p.store)
    for raw, exact in oracle.sums.items():
        if raw not in hot_raw and ps_exact.get(raw) != exact:
            cold_mismatch += 1
    hot_bad = 0
    worst = 0.0
    for mid, raw in enumerate(hot.ranked_ids):
        got = view.get(mid, float("nan"))
        want = oracle.value(raw)
        err = abs(got - want)
        tol = oracle.tolerance(raw)
        ok = err <= tol
        hot_bad += not ok
        if tol > 0:
            worst = max(worst, err / tol)
        report.keys.append((mid, raw, oracle.occurrences.get(raw, 0), sw.bank.read(mid)[1], got, want, err, tol, ok))
    missing = [raw for raw in oracle.sums if raw not in model]
    S["cold_value_mismatches"] = cold_mismatch
    S["hot_out_of_tolerance"] = hot_bad
    S["hot_worst_error_over_tol"] = worst
    S["keys_missing_from_model"] = len(missing)
    if cold_mismatch:
        report.violations.append(f"{cold_mismatch} cold keys differ from the exact sum")
    if hot_bad:
        report.violations.append(f"{hot_bad} hot keys outside tol(n)")
    if missing:
        report.violations.append(f"{len(missing)} keys missing from the merged model")
    if report.scenario == ScenarioKind.BASELINE_PS_ONLY.value and sw_writes:
        report.violations.append("baseline run wrote to switch registers")
