"""Update-frequency profiling and hot-set selection."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

CHIP_BYTES = 20 * 2**20
BYTES_PER_PARAM = 4


class EmptyTraceError(ValueError):
    pass


@dataclass
class HeatProfile:
    freq: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.freq.values())

    def __len__(self) -> int:
        return len(self.freq)

    @cached_property
    def ranked(self) -> tuple[np.ndarray, np.ndarray]:
        """(raw_ids, counts) ordered by count descending, raw_id ascending."""
        ids = np.fromiter(self.freq.keys(), dtype=np.uint64, count=len(self.freq))
        counts = np.fromiter(self.freq.values(), dtype=np.int64, count=len(self.freq))
        order = np.lexsort((ids, -counts))
        return ids[order], counts[order]

    def to_csv(self, path: str | Path) -> None:
        ids, counts = self.ranked
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["raw_id", "count"])
            w.writerows(zip(ids.tolist(), counts.tolist()))

    @classmethod
    def from_csv(cls, path: str | Path) -> "HeatProfile":
        with open(path, newline="") as fh:
            rows = csv.DictReader(fh)
            return cls({int(r["raw_id"]): int(r["count"]) for r in rows})


@dataclass
class HotSet:
    ranked_ids: list[int]
    counts: list[int]
    total: int
    clamped: bool = False

    @property
    def k(self) -> int:
        return len(self.ranked_ids)

    @property
    def hot_total(self) -> int:
        return sum(self.counts)

    @property
    def coverage(self) -> float:
        return self.hot_total / self.total if self.total else 0.0

    @cached_property
    def index_map(self) -> dict[int, int]:
        return {raw: rank for rank, raw in enumerate(self.ranked_ids)}

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "raw_id", "count"])
            w.writerows((r, raw, c) for r, (raw, c) in enumerate(zip(self.ranked_ids, self.counts)))

    @classmethod
    def from_csv(cls, path: str | Path, total: int | None = None) -> "HotSet":
        with open(path, newline="") as fh:
            rows = sorted(csv.DictReader(fh), key=lambda r: int(r["rank"]))
        ids = [int(r["raw_id"]) for r in rows]
        counts = [int(r["count"]) for r in rows]
        return cls(ids, counts, total if total is not None else sum(counts))


def count_frequencies(trace: Iterable) -> HeatProfile:
    """Count, per raw id, the batches in which it carries a nonzero gradient.

    ``trace`` yields batches; a batch is an iterable of ``(raw_id, value)``
    pairs or GradientUpdate objects.
    """
    freq: Counter = Counter()
    batches = 0
    for batch in trace:
        batches += 1
        seen = set()
        for item in batch:
            if hasattr(item, "key"):
                raw, value = item.key.raw_id, item.value
            else:
                raw, value = item[0], item[1]
            if value != 0.0:
                seen.add(int(raw))
        freq.update(seen)
    if batches == 0:
        raise EmptyTraceError("cannot profile an empty trace")
    return HeatProfile(dict(freq))


def _take(profile: HeatProfile, k: int, clamped: bool = False) -> HotSet:
    ids, counts = profile.ranked
    return HotSet(ids[:k].tolist(), counts[:k].tolist(), profile.total, clamped)


def memory_cap(c: float, bytes_per_param: int = BYTES_PER_PARAM, chip_bytes: int = CHIP_BYTES) -> int:
    return math.floor(c * chip_bytes / bytes_per_param)


def select_hot(profile: HeatProfile, p: float, c: float, bytes_per_param: int = BYTES_PER_PARAM,
               chip_bytes: int = CHIP_BYTES, max_k: int | None = None) -> HotSet:
    """Smallest top-k with coverage >= p, clamped to the memory budget.

    When the memory condition (``bytes_per_param * k <= c * chip_bytes``) or
    ``max_k`` binds first, k is the cap and ``HotSet.clamped`` is set; its
    coverage then falls short of ``p``.
    """
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    if not 0 < c < 1:
        raise ValueError("c must be in (0, 1)")
    _, counts = profile.ranked
    total = int(counts.sum())
    cum = np.cumsum(counts)
    # smallest k with cum[k-1] / total >= p, compared in exact integers
    need = math.ceil(Fraction(p) * total)
    k = int(np.searchsorted(cum, need, side="left")) + 1
    k = min(k, len(counts))
    cap = memory_cap(c, bytes_per_param, chip_bytes)
    if max_k is not None:
        cap = min(cap, max_k)
    if k > cap:
        return _take(profile, cap, clamped=True)
    return _take(profile, k)


def top_k(profile: HeatProfile, k: int) -> HotSet:
    return _take(profile, min(k, len(profile)))


def tradeoff_point(profile: HeatProfile, epsilon: float = 0.01, step: int = 1000) -> int:
    """Grow the hot list by ``step`` ids until the next step adds < epsilon coverage."""
    if step < 1:
        raise ValueError("step must be >= 1")
    _, counts = profile.ranked
    n = len(counts)
    if n < 2 * step:
        raise ValueError(f"profile has {n} parameters, need at least {2 * step}")
    total = int(counts.sum())
    cum = np.concatenate(([0], np.cumsum(counts)))
    k = step
    while k + step <= n:
        gain = int(cum[k + step] - cum[k])
        if gain < epsilon * total:
            return k
        k += step
    return (n // step) * step


def select_tradeoff(profile: HeatProfile, epsilon: float = 0.01, step: int = 1000) -> HotSet:
    return _take(profile, tradeoff_point(profile, epsilon, step))


def identification_precision(full: HotSet, sampled: HotSet) -> float:
    if full.k == 0:
        raise ValueError("ground-truth hot set is empty")
    return len(set(full.ranked_ids) & set(sampled.ranked_ids)) / full.k
