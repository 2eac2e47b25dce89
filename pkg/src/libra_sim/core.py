"""Shared domain types, run configuration and the deterministic event loop."""

from __future__ import annotations

import dataclasses
import hashlib
import heapq
import itertools
import math
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, NamedTuple

import numpy as np

COLD = None  # mapped_id marker for parameters that live on the parameter servers

_F32 = struct.Struct(">f")


class ConfigError(ValueError):
    """Raised when a SimConfig violates one of its invariants."""


def as_float32(x: float) -> float:
    """Round a Python float to the nearest binary32 value."""
    return _F32.unpack(_F32.pack(x))[0]


@dataclass(frozen=True, slots=True)
class ParameterKey:
    raw_id: int
    mapped_id: int | None = COLD

    @property
    def is_hot(self) -> bool:
        return self.mapped_id is not None


@dataclass(frozen=True, slots=True)
class GradientUpdate:
    key: ParameterKey
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite gradient for raw_id={self.key.raw_id}: {self.value!r}")


@dataclass
class SimConfig:
    num_workers: int = 16
    num_registers: int = 64
    slots_per_register: int = 512
    hot_k: int = 30_000
    memory_fraction: float = 0.05
    traffic_target: float = 0.5
    loss_rate: float = 0.0
    ack_timeout: int = 40
    heartbeat_interval: int = 50
    rng_seed: int = 0
    link_delay: int = 5
    num_ps: int = 1
    window_cap: int = 256
    retransmit_cap: int = 16
    frac_bits: int = 8
    sample_rate: float = 0.08
    chip_bytes: int = 20 * 2**20
    control_overhead_bytes: int = 130 * 1024
    job_id: int = 1
    pull_interval: int = 0
    # failure predicate; switch reply latency in ticks, drop fraction, bytes, consecutive misses
    latency_threshold: int = 40
    drop_rate_threshold: float = 0.05
    memory_threshold: int = 2 * 2**20
    missed_replies: int = 2
    seen_set_mode: str = "exact"
    bloom_bits: int = 1 << 20
    bloom_hashes: int = 4

    @property
    def num_slots(self) -> int:
        return self.num_registers * self.slots_per_register

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def validate_config(cfg: SimConfig) -> None:
    """Raise ConfigError naming every violated invariant; return None when valid."""
    problems = []
    if not 0 < cfg.memory_fraction < 1:
        problems.append("c out of (0,1)")
    if not 0 < cfg.traffic_target < 1:
        problems.append("p out of (0,1)")
    if cfg.hot_k > cfg.num_slots:
        problems.append("hot set exceeds slots")
    for name in ("num_workers", "num_registers", "slots_per_register", "hot_k",
                 "num_ps", "window_cap", "heartbeat_interval", "link_delay"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be >= 1")
    if not 0 <= cfg.loss_rate < 1:
        problems.append("loss_rate out of [0,1)")
    if cfg.ack_timeout <= 2 * cfg.link_delay:
        problems.append("ack_timeout must exceed the round trip")
    if not 4 <= cfg.frac_bits <= 10:
        problems.append("frac_bits out of [4,10]")
    if not 0 < cfg.sample_rate <= 1:
        problems.append("sample_rate out of (0,1]")
    if not 0 <= cfg.rng_seed < 2**64:
        problems.append("rng_seed must fit in 64 bits")
    if cfg.seen_set_mode not in ("exact", "bloom"):
        problems.append("seen_set_mode must be exact or bloom")
    if cfg.num_workers >= 2**16:
        problems.append("worker_id must fit in 16 bits")
    if problems:
        raise ConfigError("; ".join(problems))


def _coerce(kind: Any, text: str) -> Any:
    if kind in (int, "int"):
        return int(text, 0)
    if kind in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, base: SimConfig | None = None) -> SimConfig:
    """Parse flat ``key=value`` lines (``#`` starts a comment)."""
    types = {f.name: f.type for f in fields(SimConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(types[key], val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return dataclasses.replace(base or SimConfig(), **values)


def load_config(path: str | Path, base: SimConfig | None = None) -> SimConfig:
    return parse_config(Path(path).read_text(), base)


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible random stream for one named component."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(label.encode()),)))


class Event(NamedTuple):
    fire_time: int
    ordinal: int
    action: Callable[..., Any]
    args: tuple


class EventLoop:
    """Single-threaded discrete-event loop over integer ticks.

    Events fire in ``(fire_time, ordinal)`` order, where the ordinal is the
    scheduling order, so a fixed seed and config always produce the same trace.
    """

    def __init__(self, record_trace: bool = False):
        self.now = 0
        self._queue: list[Event] = []
        self._ordinal = itertools.count()
        self.fired = 0
        self.trace: list[tuple[int, int, str]] | None = [] if record_trace else None
        self._stopped = False

    def at(self, tick: int, action: Callable[..., Any], *args) -> None:
        if tick < self.now:
            raise ValueError(f"cannot schedule in the past ({tick} < {self.now})")
        heapq.heappush(self._queue, Event(tick, next(self._ordinal), action, args))

    def after(self, delay: int, action: Callable[..., Any], *args) -> None:
        self.at(self.now + delay, action, *args)

    def stop(self) -> None:
        self._stopped = True

    def __len__(self) -> int:
        return len(self._queue)

    def run(self, until: int | None = None, max_events: int | None = None) -> int:
        """Run until the queue drains, ``stop()`` is called, or a bound is hit."""
        self._stopped = False
        count = 0
        while self._queue and not self._stopped:
            if until is not None and self._queue[0].fire_time > until:
                self.now = until
                break
            ev = heapq.heappop(self._queue)
            self.now = ev.fire_time
            if self.trace is not None:
                self.trace.append((ev.fire_time, ev.ordinal, getattr(ev.action, "__qualname__", repr(ev.action))))
            ev.action(*ev.args)
            count += 1
            if max_events is not None and count >= max_events:
                break
        self.fired += count
        return count
