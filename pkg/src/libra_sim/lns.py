"""binary32 summation by table lookup in a base-2 log number system.

A value is carried as a sign and a 16-bit signed fixed-point ``log2|x|`` with
``frac_bits`` fractional bits (Q7.8 by default).  Converting a float uses the
split ``1.f = m + dm`` where ``m`` holds the leading 11 fraction bits and
``dm`` the trailing 12, so that::

    log2|x| ~= (e - 127) + log2(m) + 2 ** (log2(dm) - log2(m * ln 2))

which needs only an exponent table, three 12-bit-keyed log tables and one
16-bit-keyed exp table.  Addition of like signs uses ``log2(1 + 2**t)``
(``mi``), unlike signs use ``log2(1 - 2**t)`` (``sb``); decoding reuses the
exp table for the fractional part and reassembles the exponent bit-wise.

All seven tables hold 2-byte entries; ``LnsTables.nbytes`` is 418,304.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

LOG_MIN = -(1 << 15)
LOG_MAX = (1 << 15) - 1

# internal resolutions of the 16-bit tables
FINE_BITS = 16  # log_m entries and exp keys/entries: Q0.16
THETA_BITS = 10  # log_dm / log_mln2 entries: signed Q5.10
CLAMP_LOG = 16  # |t| beyond this: log2(1 +- 2**t) treated as 0

SENTINEL = -(1 << 15)
MAGIC = b"LIBRALNS"

_F32_BITS = struct.Struct(">I")
_F32 = struct.Struct(">f")
FLT_MAX_BITS = 0x7F7FFFFF
INT32_MAX = 2**31 - 1
INT32_MIN = -(2**31)


class LnsValue(NamedTuple):
    """sign is +1, -1 or 0 (ZERO); logmag is log2|x| in Q(15-F).F units."""

    sign: int
    logmag: int

    @property
    def is_zero(self) -> bool:
        return self.sign == 0


ZERO = LnsValue(0, 0)


@dataclass
class LnsStats:
    saturated: int = 0
    underflowed: int = 0
    cancelled: int = 0
    flushed_subnormals: int = 0


@dataclass(frozen=True)
class LnsTables:
    frac_bits: int
    epo: tuple  # 256 x int16: e - 127
    log_m: tuple  # 4096 x uint16, keyed by hidden bit + f1..f11, Q0.16
    log_dm: tuple  # 4096 x int16, keyed by f12..f23, Q5.10
    log_mln2: tuple  # 4096 x int16, keyed like log_m, Q5.10
    mi: tuple  # 65536 x int16, keyed by logmag difference, Q.F
    sb: tuple  # 65536 x int16, keyed by logmag difference, Q.F
    exp: tuple  # 65536 x uint16, keyed by Q0.16 fraction: (2**f - 1) in Q0.16

    ORDER = ("epo", "log_m", "log_dm", "log_mln2", "mi", "sb", "exp")
    SIGNED = {"epo": True, "log_m": False, "log_dm": True, "log_mln2": True,
              "mi": True, "sb": True, "exp": False}

    @property
    def nbytes(self) -> int:
        return 2 * sum(len(getattr(self, name)) for name in self.ORDER)

    @property
    def step(self) -> float:
        """Relative size of one quantization step of logmag."""
        return 2.0 ** (2.0 ** -self.frac_bits) - 1.0

    def to_bytes(self) -> bytes:
        parts = [MAGIC, bytes([self.frac_bits])]
        for name in self.ORDER:
            dtype = "<i2" if self.SIGNED[name] else "<u2"
            parts.append(np.asarray(getattr(self, name), dtype=np.int64).astype(dtype).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LnsTables":
        if blob[:8] != MAGIC:
            raise ValueError("not an LNS table dump (bad magic)")
        frac_bits = blob[8]
        sizes = {"epo": 256, "log_m": 4096, "log_dm": 4096, "log_mln2": 4096,
                 "mi": 65536, "sb": 65536, "exp": 65536}
        if len(blob) != 9 + 2 * sum(sizes.values()):
            raise ValueError(f"table dump has {len(blob)} bytes, expected {9 + 2 * sum(sizes.values())}")
        offset = 9
        tables = {}
        for name in cls.ORDER:
            dtype = "<i2" if cls.SIGNED[name] else "<u2"
            arr = np.frombuffer(blob, dtype=dtype, count=sizes[name], offset=offset)
            tables[name] = tuple(int(v) for v in arr)
            offset += 2 * sizes[name]
        return cls(frac_bits=frac_bits, **tables)

    def dump(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "LnsTables":
        return cls.from_bytes(Path(path).read_bytes())


def _q(x: np.ndarray, bits: int) -> np.ndarray:
    """Round-to-nearest (ties up) quantization to ``bits`` fractional bits."""
    return np.floor(x * (1 << bits) + 0.5).astype(np.int64)


_TABLE_CACHE: dict[int, LnsTables] = {}


def build_tables(frac_bits: int = 8) -> LnsTables:
    """Populate all seven lookup tables from exact float64 arithmetic."""
    if not 4 <= frac_bits <= 10:
        raise ValueError(f"frac_bits must be in [4, 10], got {frac_bits}")
    if frac_bits in _TABLE_CACHE:
        return _TABLE_CACHE[frac_bits]
    F = frac_bits

    epo = np.arange(256, dtype=np.int64) - 127

    key = np.arange(4096, dtype=np.float64)
    m = key / 2048.0
    hi = key >= 2048
    log_m = np.zeros(4096, dtype=np.int64)
    log_m[hi] = _q(np.log2(m[hi]), FINE_BITS)
    log_mln2 = np.zeros(4096, dtype=np.int64)
    log_mln2[hi] = _q(np.log2(m[hi] * math.log(2.0)), THETA_BITS)

    log_dm = np.full(4096, SENTINEL, dtype=np.int64)
    log_dm[1:] = _q(np.log2(key[1:]) - 23.0, THETA_BITS)

    d = np.arange(65536, dtype=np.float64)
    t = -d / (1 << F)
    live = d <= CLAMP_LOG * (1 << F)
    mi = np.zeros(65536, dtype=np.int64)
    mi[live] = _q(np.log2(1.0 + np.exp2(t[live])), F)
    sb = np.zeros(65536, dtype=np.int64)
    sb_live = live & (d > 0)
    sb[sb_live] = _q(np.log2(-np.expm1(t[sb_live] * math.log(2.0))), F)
    sb[0] = SENTINEL

    phi = np.arange(65536, dtype=np.float64) / 65536.0
    exp = _q(np.expm1(phi * math.log(2.0)), FINE_BITS)

    for name, arr, lo, hi_ in (("epo", epo, -32768, 32767), ("log_m", log_m, 0, 65535),
                               ("log_dm", log_dm, -32768, 32767), ("log_mln2", log_mln2, -32768, 32767),
                               ("mi", mi, -32768, 32767), ("sb", sb, -32768, 32767),
                               ("exp", exp, 0, 65535)):
        if arr.min() < lo or arr.max() > hi_:
            raise AssertionError(f"{name} entries overflow their 16-bit format")

    tables = LnsTables(
        frac_bits=F,
        epo=tuple(epo.tolist()),
        log_m=tuple(log_m.tolist()),
        log_dm=tuple(log_dm.tolist()),
        log_mln2=tuple(log_mln2.tolist()),
        mi=tuple(mi.tolist()),
        sb=tuple(sb.tolist()),
        exp=tuple(exp.tolist()),
    )
    _TABLE_CACHE[F] = tables
    return tables


def float_bits(x: float) -> int:
    return _F32_BITS.unpack(_F32.pack(x))[0]


def bits_float(bits: int) -> float:
    return _F32.unpack(_F32_BITS.pack(bits))[0]


def float_to_lns(x: float, t: LnsTables, stats: LnsStats | None = None) -> LnsValue:
    if not math.isfinite(x):
        raise ValueError(f"cannot encode non-finite value {x!r}")
    bits = float_bits(x)
    e = (bits >> 23) & 0xFF
    if e == 0:
        if stats is not None and bits & 0x7FFFFF:
            stats.flushed_subnormals += 1
        return ZERO
    sign = -1 if bits >> 31 else 1
    frac = bits & 0x7FFFFF
    key_m = 0x800 | (frac >> 12)
    fine = t.log_m[key_m]
    dm = frac & 0xFFF
    if dm:
        theta = t.log_dm[dm] - t.log_mln2[key_m]
        shift = -(theta >> THETA_BITS)
        mant = 65536 + t.exp[(theta & ((1 << THETA_BITS) - 1)) << (FINE_BITS - THETA_BITS)]
        fine += (mant + (1 << (shift - 1))) >> shift
    F = t.frac_bits
    logmag = (t.epo[e] << F) + ((fine + (1 << (FINE_BITS - F - 1))) >> (FINE_BITS - F))
    if logmag > LOG_MAX:
        if stats is not None:
            stats.saturated += 1
        logmag = LOG_MAX
    elif logmag < LOG_MIN:
        if stats is not None:
            stats.underflowed += 1
        return ZERO
    return LnsValue(sign, logmag)


def lns_add(a: LnsValue, b: LnsValue, t: LnsTables, stats: LnsStats | None = None) -> LnsValue:
    if a.sign == 0:
        return b
    if b.sign == 0:
        return a
    # canonical operand order makes the result independent of argument order
    if a.logmag < b.logmag or (a.logmag == b.logmag and a.sign < b.sign):
        a, b = b, a
    d = a.logmag - b.logmag
    if a.sign == b.sign:
        r = a.logmag + t.mi[d]
        if r > LOG_MAX:
            if stats is not None:
                stats.saturated += 1
            r = LOG_MAX
        return LnsValue(a.sign, r)
    if d == 0:
        if stats is not None:
            stats.cancelled += 1
        return ZERO
    r = a.logmag + t.sb[d]
    if r < LOG_MIN:
        if stats is not None:
            stats.underflowed += 1
        return ZERO
    return LnsValue(a.sign, r)


def lns_to_float(v: LnsValue, t: LnsTables) -> float:
    if v.sign == 0:
        return 0.0
    F = t.frac_bits
    n = v.logmag >> F
    sign_bit = 0x80000000 if v.sign < 0 else 0
    if n < -126:
        return -0.0 if v.sign < 0 else 0.0
    if n > 127:
        return bits_float(sign_bit | FLT_MAX_BITS)
    mant = t.exp[(v.logmag & ((1 << F) - 1)) << (FINE_BITS - F)]
    return bits_float(sign_bit | ((n + 127) << 23) | (mant << 7))


def lns_sum(values, t: LnsTables, stats: LnsStats | None = None) -> LnsValue:
    acc = ZERO
    for x in values:
        acc = lns_add(acc, float_to_lns(x, t, stats), t, stats)
    return acc


# float-to-integer baseline ------------------------------------------------

@dataclass
class F2iStats:
    saturated: int = 0


def f2i_convert(x: float, scale: int, stats: F2iStats | None = None) -> int:
    if scale <= 0:
        raise ValueError("scale must be positive")
    i = round(x * scale)
    if i > INT32_MAX or i < INT32_MIN:
        if stats is not None:
            stats.saturated += 1
        i = max(INT32_MIN, min(INT32_MAX, i))
    return i


def f2i_add(i: int, j: int, stats: F2iStats | None = None) -> int:
    s = i + j
    if s > INT32_MAX or s < INT32_MIN:
        if stats is not None:
            stats.saturated += 1
        s = max(INT32_MIN, min(INT32_MAX, s))
    return s


def f2i_restore(i: int, scale: int) -> float:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return _F32.unpack(_F32.pack(i / scale))[0]


def choose_global_scale(pairs) -> int:
    """Largest power-of-two scale under which the widest pair sum fits int32."""
    widest = max((abs(x) + abs(y) for x, y in pairs), default=0.0)
    if widest == 0.0:
        return 1 << 31
    return 1 << max(0, math.floor(math.log2(INT32_MAX / widest)))


# precision scoring ----------------------------------------------------------

def relative_error(approx: float, exact: float) -> float:
    if exact == 0.0:
        return 0.0 if approx == 0.0 else math.inf
    return abs(approx - exact) / abs(exact)


def accuracy(rel_err: float, kind: str = "exp") -> float:
    """Precision score of one result.

    ``"exp"`` scores ``exp(-r)``; ``"linear"`` scores ``max(0, 1 - r)``.  They
    agree to first order; they differ for results lost entirely (r = 1), which
    score 1/e and 0 respectively.
    """
    if kind == "exp":
        return math.exp(-rel_err)
    if kind == "linear":
        return max(0.0, 1.0 - rel_err)
    raise ValueError(f"unknown accuracy kind {kind!r}")


def random_binary32(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random binary32 values in (-1, 1): uniform sign, binade and mantissa bits."""
    sign = rng.integers(0, 2, n, dtype=np.uint32) << 31
    exponent = rng.integers(1, 127, n, dtype=np.uint32) << 23
    mantissa = rng.integers(0, 1 << 23, n, dtype=np.uint32)
    return (sign | exponent | mantissa).view(np.float32)


def uniform_binary32(rng: np.random.Generator, n: int) -> np.ndarray:
    """Linearly uniform values in (-1, 1), excluding zero."""
    x = rng.uniform(-1.0, 1.0, n).astype(np.float32)
    x[x == 0] = np.float32(2.0**-24)
    return x
