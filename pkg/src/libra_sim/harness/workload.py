"""Synthetic sparse-gradient workloads with Zipf key popularity."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..core import derive_rng

_MIX = 0x9E3779B97F4A7C15  # odd, so multiplication mod 2**64 is a bijection
_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class WorkloadSpec:
    n_params: int = 100_000
    zipf_s: float = 1.1
    batches_per_worker: int = 50
    nonzero_per_batch: int = 1250
    num_workers: int = 16
    value_low: float = -1.0
    value_high: float = 1.0
    batch_interval: int = 100

    def validate(self) -> None:
        if self.n_params < 1:
            raise ValueError("n_params must be positive")
        if not 0 < self.nonzero_per_batch <= self.n_params:
            raise ValueError(f"nonzero_per_batch must be in [1, {self.n_params}]")
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")
        if self.batches_per_worker < 0 or self.num_workers < 1:
            raise ValueError("need at least one worker and a non-negative batch count")
        if not self.value_low < self.value_high:
            raise ValueError("empty value range")

    @property
    def total_pairs(self) -> int:
        return self.num_workers * self.batches_per_worker * self.nonzero_per_batch


@dataclass
class Batch:
    worker: int
    tick: int
    pairs: list[tuple[int, float]]


def zipf_probabilities(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def raw_ids(n: int, seed: int) -> np.ndarray:
    """64-bit raw id for each popularity rank: a seeded shuffle, then a bijective scramble."""
    perm = derive_rng(seed, "workload.ids").permutation(n)
    return np.array([((int(p) + 1) * _MIX) & _MASK for p in perm], dtype=np.uint64)


def _successive_sample(rng: np.random.Generator, cdf: np.ndarray, k: int) -> list[int]:
    """k distinct ranks: draw with replacement and drop repeats (same law as sequential no-replacement draws)."""
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < k:
        for r in np.searchsorted(cdf, rng.random(2 * (k - len(chosen))), side="right").tolist():
            if r not in seen:
                seen.add(r)
                chosen.append(r)
                if len(chosen) == k:
                    break
    return chosen


def _values(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    v = rng.uniform(lo, hi, n).astype(np.float32)
    while True:
        zero = v == 0
        if not zero.any():
            return v
        v[zero] = rng.uniform(lo, hi, int(zero.sum())).astype(np.float32)


def generate_workload(spec: WorkloadSpec, seed: int) -> list[Batch]:
    """Batches ordered by (tick, worker); keys Zipf(s) without replacement within a batch."""
    spec.validate()
    probs = zipf_probabilities(spec.n_params, spec.zipf_s)
    ids = raw_ids(spec.n_params, seed)
    out = []
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    # rejection gets slow once a batch covers most of the key space
    dense = spec.nonzero_per_batch * 2 > spec.n_params
    streams = [derive_rng(seed, f"workload.worker{w}") for w in range(spec.num_workers)]
    for b in range(spec.batches_per_worker):
        for w, rng in enumerate(streams):
            if dense:
                ranks = rng.choice(spec.n_params, size=spec.nonzero_per_batch, replace=False, p=probs)
            else:
                ranks = np.array(_successive_sample(rng, cdf, spec.nonzero_per_batch), dtype=np.int64)
            vals = _values(rng, len(ranks), spec.value_low, spec.value_high)
            pairs = list(zip(ids[ranks].tolist(), vals.tolist()))
            out.append(Batch(w, b * spec.batch_interval, pairs))
    return out


def write_jsonl(batches: Iterable[Batch], path: str | Path) -> None:
    with open(path, "w") as fh:
        for b in batches:
            fh.write(json.dumps({"worker": b.worker, "tick": b.tick, "pairs": b.pairs}, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[Batch]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs = [(int(k), float(v)) for k, v in rec["pairs"]]
                out.append(Batch(int(rec["worker"]), int(rec["tick"]), pairs))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad workload record ({exc})") from exc
    return out


def iter_pairs(batches: Iterable[Batch]) -> Iterator[list[tuple[int, float]]]:
    for b in batches:
        yield b.pairs


def sample_batches(batches: list[Batch], rate: float, seed: int) -> list[Batch]:
    """Uniform row-level sample without replacement, original order kept."""
    if not 0 < rate <= 1:
        raise ValueError("sample rate must be in (0, 1]")
    n = max(1, round(rate * len(batches))) if batches else 0
    idx = np.sort(derive_rng(seed, "sample").choice(len(batches), size=n, replace=False)) if n else []
    return [batches[i] for i in idx]
