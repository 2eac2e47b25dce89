from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from libra_sim.core import GradientUpdate, ParameterKey
from libra_sim.hotid import (EmptyTraceError, HeatProfile, HotSet, count_frequencies, identification_precision,
                             memory_cap, select_hot, select_tradeoff, top_k, tradeoff_point)

profiles = st.dictionaries(st.integers(0, 2**64 - 1), st.integers(1, 1000), min_size=1, max_size=200)


def test_counting_per_batch():
    trace = [[(7, 0.1), (8, 0.2)], [(7, 0.3)], [(7, -0.1), (9, 0.0)]]
    prof = count_frequencies(trace)
    assert prof.freq[7] == 3 and prof.freq[8] == 1 and 9 not in prof.freq
    objs = [[GradientUpdate(ParameterKey(3), 1.0)]]
    assert count_frequencies(objs).freq == {3: 1}


def test_uniform_counts():
    prof = count_frequencies([[(i, 1.0) for i in range(50)]])
    assert set(prof.freq.values()) == {1} and prof.total == 50


def test_empty_trace():
    with pytest.raises(EmptyTraceError):
        count_frequencies([])


def test_zipf_against_histogram_oracle():
    rng = np.random.default_rng(0)
    n = 100_000
    w = np.arange(1, n + 1) ** -1.0
    draws = rng.choice(n, size=1_000_000, p=w / w.sum())
    batches = draws.reshape(1000, 1000)
    prof = count_frequencies([[(int(k), 1.0) for k in set(b.tolist())] for b in batches])
    oracle = Counter()
    for b in batches:
        oracle.update(set(b.tolist()))
    assert prof.freq == dict(oracle)
    ids, counts = prof.ranked
    assert int(ids[0]) == 0 and counts[0] == max(oracle.values())


def test_select_examples():
    prof = HeatProfile({1: 50, 2: 30, 3: 20})
    hot = select_hot(prof, 0.5, 0.9)
    assert hot.k == 1 and hot.coverage == 0.5 and hot.ranked_ids == [1]
    uni = HeatProfile({i: 1 for i in range(100)})
    assert select_hot(uni, 0.5, 0.9).k == 50


def test_select_zipf_against_scan_oracle():
    n = 1_000_000
    counts = np.floor(1e7 * np.arange(1, n + 1) ** -1.1).astype(int) + 1
    prof = HeatProfile(dict(zip(range(n), counts.tolist())))
    hot = select_hot(prof, 0.5, 0.05)
    cum, total, need = 0, int(counts.sum()), None
    for k, c in enumerate(counts.tolist(), 1):
        cum += c
        if cum * 2 >= total:
            need = k
            break
    cap = memory_cap(0.05)
    assert hot.k == min(need, cap)
    assert hot.clamped == (need > cap)


def test_clamping():
    prof = HeatProfile({i: 1 for i in range(1000)})
    hot = select_hot(prof, 0.9, 0.5, chip_bytes=400)
    assert hot.k == 50 and hot.clamped and hot.coverage < 0.9
    hot = select_hot(prof, 0.9, 0.5, max_k=10)
    assert hot.k == 10 and hot.clamped


@pytest.mark.parametrize("p,c", [(0, 0.5), (1, 0.5), (0.5, 0), (0.5, 1)])
def test_select_rejects_bad_ratios(p, c):
    with pytest.raises(ValueError):
        select_hot(HeatProfile({1: 1}), p, c)


@given(profiles, st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_select_matches_scan_and_is_monotone(freq, p1, p2):
    prof = HeatProfile(freq)
    lo, hi = sorted((p1, p2))
    a, b = select_hot(prof, lo, 0.99), select_hot(prof, hi, 0.99)
    assert a.k <= b.k
    counts = sorted(freq.values(), reverse=True)
    total = sum(counts)
    # exact integer oracle: smallest k with prefix * denominator >= p * total
    from fractions import Fraction
    need = Fraction(hi) * total
    acc, k = 0, 0
    for k, c in enumerate(counts, 1):
        acc += c
        if acc >= need:
            break
    assert b.k == k
    assert b.hot_total == sum(counts[:b.k])
    assert b.coverage == sum(prof.freq[i] for i in b.ranked_ids) / prof.total


@given(profiles)
def test_tiny_p_gives_nonempty_set(freq):
    assert select_hot(HeatProfile(freq), 1e-9, 0.999).k >= 1


def test_ties_break_by_raw_id():
    prof = HeatProfile({5: 2, 3: 2, 9: 2, 1: 1})
    assert top_k(prof, 3).ranked_ids == [3, 5, 9]


def test_precision_examples():
    a = HotSet(list(range(1000)), [1] * 1000, 1000)
    assert identification_precision(a, a) == 1.0
    assert identification_precision(a, HotSet(list(range(1000, 2000)), [1] * 1000, 1000)) == 0.0
    b = HotSet(list(range(912)) + list(range(5000, 5088)), [1] * 1000, 1000)
    assert identification_precision(a, b) == 0.912
    with pytest.raises(ValueError):
        identification_precision(HotSet([], [], 0), a)


def test_tradeoff_examples():
    freq = {i: 10 for i in range(30_000)}
    freq.update({i: 1 for i in range(30_000, 130_000)})
    prof = HeatProfile(freq)
    assert tradeoff_point(prof, 0.01, 1000) == 30_000
    assert select_tradeoff(prof).k == 30_000
    uni = HeatProfile({i: 1 for i in range(2500)})
    assert tradeoff_point(uni, 0.01, 1000) == 2000
    with pytest.raises(ValueError):
        tradeoff_point(HeatProfile({i: 1 for i in range(1999)}), 0.01, 1000)


def test_tradeoff_on_zipf_against_cumsum_rescan():
    n = 200_000
    counts = (1e6 * np.arange(1, n + 1) ** -1.1).astype(int) + 1
    prof = HeatProfile(dict(enumerate(counts.tolist())))
    k = tradeoff_point(prof, 0.01, 1000)
    total = int(counts.sum())
    block = [int(counts[i:i + 1000].sum()) for i in range(0, n, 1000)]
    expect = next((i + 1) * 1000 for i in range(len(block) - 1) if block[i + 1] < 0.01 * total)
    assert k == expect


def test_csv_roundtrip(tmp_path):
    prof = HeatProfile({2**63 + 1: 5, 4: 9, 6: 5})
    prof.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "raw_id,count" and lines[1] == "4,9"
    assert HeatProfile.from_csv(tmp_path / "p.csv").freq == prof.freq
    hot = top_k(prof, 2)
    hot.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[:2] == ["rank,raw_id,count", "0,4,9"]
    back = HotSet.from_csv(tmp_path / "h.csv", total=prof.total)
    assert back.ranked_ids == hot.ranked_ids and back.coverage == hot.coverage
