"""Register placement of hot parameters and layout-aware gradient packaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .wire import PAIR_CAPACITY


class LayoutMode(str, Enum):
    HEAT_BASED = "heat"
    RANDOM = "random"


class DuplicateKeyError(ValueError):
    pass


@dataclass(frozen=True)
class RegisterLayout:
    """Maps a mapped_id (heat rank) to a (register, slot) cell.

    HEAT_BASED applies ``register = id % m, slot = id // m`` so rank ``i`` and
    ``i + m`` share a register.  RANDOM first permutes the ids with a seeded
    permutation and then applies the same rule.
    """

    m: int
    slots_per_register: int
    k: int
    mode: LayoutMode = LayoutMode.HEAT_BASED
    seed: int = 0

    def __post_init__(self):
        if self.k > self.m * self.slots_per_register:
            raise ValueError(f"{self.k} hot parameters do not fit {self.m}x{self.slots_per_register} slots")

    @cached_property
    def _perm(self) -> list[int] | None:
        if self.mode is LayoutMode.HEAT_BASED:
            return None
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(0x4C41,)))
        return rng.permutation(self.k).tolist()

    @property
    def num_slots(self) -> int:
        return self.m * self.slots_per_register

    def position(self, mapped_id: int) -> int:
        perm = self._perm
        return mapped_id if perm is None else perm[mapped_id]

    def register_of(self, mapped_id: int) -> int:
        return self.position(mapped_id) % self.m

    def locate(self, mapped_id: int) -> tuple[int, int]:
        pos = self.position(mapped_id)
        return pos % self.m, pos // self.m

    def cell(self, mapped_id: int) -> int:
        """Flat index register * slots_per_register + slot."""
        reg, slot = self.locate(mapped_id)
        return reg * self.slots_per_register + slot

    def register_fn(self) -> Callable[[int], int]:
        if self._perm is None:
            m = self.m
            return lambda i: i % m
        perm, m = self._perm, self.m
        return lambda i: perm[i] % m


def register_of(key: int, m: int) -> int:
    return key % m


def estimate_packets(G: Sequence, capacity: int = PAIR_CAPACITY) -> int:
    if len(G) == 0:
        raise ValueError("cannot estimate packets for an empty batch")
    return math.ceil(len(G) / capacity)


@dataclass
class PackResult:
    packets: list[list[tuple[int, float]]]
    constrained: int  # leading packets built under the register constraint
    spilled: int  # |G'|

    @property
    def spill_packets(self) -> list[list[tuple[int, float]]]:
        return self.packets[self.constrained:]


def package_gradients(G: Sequence[tuple[int, float]], m: int, capacity: int = PAIR_CAPACITY,
                      register: Callable[[int], int] | None = None) -> PackResult:
    """Layout-aware packaging of hot ``(mapped_id, value)`` pairs.

    Each gradient goes to the earliest-created estimated packet that is not
    full and holds no key of the same register; gradients with no such packet
    are set aside and packed afterwards into fresh packets, in key order,
    without the register constraint.

    The earliest valid packet for a register only moves forward (a packet
    never loses a register or un-fills), so a per-register cursor replaces the
    candidate-list scan without changing which packet is chosen.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    if not G:
        return PackResult([], 0, 0)
    reg_of = register or (lambda i: i % m)
    n_pkts = estimate_packets(G, capacity)
    packets: list[list[tuple[int, float]]] = [[] for _ in range(n_pkts)]
    regs: list[set[int]] = [set() for _ in range(n_pkts)]
    cursor: dict[int, int] = {}
    seen: set[int] = set()
    spill = []
    for pair in G:
        key = pair[0]
        if key in seen:
            raise DuplicateKeyError(f"mapped_id {key} appears twice in one batch")
        seen.add(key)
        r = reg_of(key)
        j = cursor.get(r, 0)
        while j < n_pkts and (len(packets[j]) >= capacity or r in regs[j]):
            j += 1
        cursor[r] = j
        if j == n_pkts:
            spill.append(pair)
            continue
        packets[j].append(pair)
        regs[j].add(r)
    out = [p for p in packets if p]
    constrained = len(out)
    spill.sort(key=lambda p: p[0])
    out.extend(spill[i:i + capacity] for i in range(0, len(spill), capacity))
    return PackResult(out, constrained, len(spill))


def package_sequential(G: Sequence[tuple[int, float]], capacity: int = PAIR_CAPACITY) -> PackResult:
    """Layout-oblivious packaging: fill packets in key order."""
    seen = set()
    for pair in G:
        if pair[0] in seen:
            raise DuplicateKeyError(f"mapped_id {pair[0]} appears twice in one batch")
        seen.add(pair[0])
    ordered = sorted(G, key=lambda p: p[0])
    return PackResult([ordered[i:i + capacity] for i in range(0, len(ordered), capacity)], 0, 0)


def packet_recirculations(keys: Sequence[int], register: Callable[[int], int]) -> int:
    """Extra pipeline passes: max pairs landing on one register, minus one."""
    if not keys:
        return 0
    loads: dict[int, int] = {}
    for k in keys:
        r = register(k)
        loads[r] = loads.get(r, 0) + 1
    return max(loads.values()) - 1


def expected_recirculations(packets: Sequence[Sequence], layout: RegisterLayout | int) -> float:
    """Mean recirculations per packet; ``layout`` may be a RegisterLayout or m."""
    if not packets:
        return 0.0
    register = layout.register_fn() if isinstance(layout, RegisterLayout) else (lambda i, m=layout: i % m)
    total = 0
    for pkt in packets:
        keys = [p[0] if isinstance(p, tuple) else p for p in pkt]
        total += packet_recirculations(keys, register)
    return total / len(packets)
