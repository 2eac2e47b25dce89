import numpy as np
import pytest
from hypothesis import given, strategies as st

from libra_sim.layout import (DuplicateKeyError, LayoutMode, RegisterLayout, estimate_packets, expected_recirculations,
                              package_gradients, package_sequential, packet_recirculations, register_of)


def algorithm1_replay(G, m, capacity, reg=None):
    """Line-by-line replay: P1 holds non-full packets, candidates exclude same-register packets."""
    reg = reg or (lambda i: i % m)
    n = -(-len(G) // capacity)
    P = [[] for _ in range(n)]
    P1 = list(range(n))
    G2 = []
    for theta in G:
        k = reg(theta[0])
        P2 = [j for j in P1 if all(reg(q[0]) != k for q in P[j])]
        if P2:
            j = P2[0]
            P[j].append(theta)
            if len(P[j]) == capacity:
                P1.remove(j)
        else:
            G2.append(theta)
    out = [p for p in P if p]
    G2.sort()
    out += [G2[i:i + capacity] for i in range(0, len(G2), capacity)]
    return out


def test_register_examples():
    assert register_of(0, 8) == 0
    assert register_of(13, 8) == 5


def test_heat_layout_groups_every_mth_rank():
    lay = RegisterLayout(3, 4, 10)
    assert [i for i in range(10) if lay.register_of(i) == 0] == [0, 3, 6, 9]
    assert lay.locate(7) == (1, 2)
    assert lay.cell(7) == 1 * 4 + 2


@given(st.integers(1, 64), st.integers(0, 5000))
def test_heat_layout_property(m, i):
    lay = RegisterLayout(m, 5000 // m + 2, 5000 + m + 1)
    assert lay.register_of(i) == lay.register_of(i + m)
    if i % m != m - 1:
        assert lay.register_of(i) != lay.register_of(i + 1)


def test_random_layout_is_a_seeded_bijection():
    lay = RegisterLayout(8, 16, 100, LayoutMode.RANDOM, seed=3)
    cells = {lay.cell(i) for i in range(100)}
    assert len(cells) == 100
    again = RegisterLayout(8, 16, 100, LayoutMode.RANDOM, seed=3)
    assert [again.cell(i) for i in range(100)] == [lay.cell(i) for i in range(100)]
    assert [RegisterLayout(8, 16, 100, LayoutMode.RANDOM, seed=4).cell(i) for i in range(100)] != \
        [lay.cell(i) for i in range(100)]


def test_layout_capacity_check():
    with pytest.raises(ValueError):
        RegisterLayout(2, 2, 5)


def test_estimate_packets():
    assert estimate_packets([1]) == 1
    assert estimate_packets(list(range(22))) == 1
    assert estimate_packets(list(range(23))) == 2
    with pytest.raises(ValueError):
        estimate_packets([])


def test_distinct_registers_single_packet():
    res = package_gradients([(0, 1.0), (1, 1.0), (2, 1.0)], 3, capacity=30)
    assert res.packets == [[(0, 1.0), (1, 1.0), (2, 1.0)]]
    assert expected_recirculations(res.packets, 3) == 0


def test_same_register_hand_simulation():
    # one estimated packet takes theta_0; theta_m and theta_2m find no candidate and go to G'
    m = 5
    res = package_gradients([(0, 1.0), (m, 2.0), (2 * m, 3.0)], m, capacity=30)
    assert res.packets == [[(0, 1.0)], [(m, 2.0), (2 * m, 3.0)]]
    assert res.constrained == 1 and res.spilled == 2
    assert res.spill_packets == [[(m, 2.0), (2 * m, 3.0)]]


def test_duplicate_key_rejected():
    with pytest.raises(DuplicateKeyError):
        package_gradients([(1, 1.0), (1, 2.0)], 4)
    with pytest.raises(DuplicateKeyError):
        package_sequential([(1, 1.0), (1, 2.0)])


def test_zipf_batch_matches_replay_oracle():
    rng = np.random.default_rng(11)
    n = 30_000
    w = np.arange(1, n + 1) ** -1.1
    keys = rng.choice(n, size=10_000, replace=False, p=w / w.sum())
    G = [(int(k), float(i)) for i, k in enumerate(keys)]
    assert package_gradients(G, 64).packets == algorithm1_replay(G, 64, 22)


grad_batches = st.lists(st.integers(0, 400), unique=True, min_size=1, max_size=120).map(
    lambda ks: [(k, float(i)) for i, k in enumerate(ks)])


@given(grad_batches, st.integers(1, 16), st.integers(1, 22))
def test_packaging_properties(G, m, cap):
    res = package_gradients(G, m, cap)
    assert res.packets == algorithm1_replay(G, m, cap)
    flat = [p for pkt in res.packets for p in pkt]
    assert sorted(flat) == sorted(G)  # conservation
    assert all(1 <= len(p) <= cap for p in res.packets)
    for pkt in res.packets[:res.constrained]:
        regs = [k % m for k, _ in pkt]
        assert len(regs) == len(set(regs))


@given(grad_batches, st.integers(2, 16), st.integers(0, 5))
def test_packaging_with_custom_register_fn(G, m, seed):
    lay = RegisterLayout(m, 401 // m + 1, 401, LayoutMode.RANDOM, seed)
    reg = lay.register_fn()
    assert package_gradients(G, m, 22, reg).packets == algorithm1_replay(G, m, 22, reg)


def test_recirculation_counts():
    assert packet_recirculations([0, 1, 2], lambda k: k % 8) == 0
    assert packet_recirculations([0, 8, 16], lambda k: k % 8) == 2
    assert packet_recirculations([], lambda k: k) == 0
    lay = RegisterLayout(8, 4, 32)
    assert expected_recirculations([[(0, 1.0), (8, 1.0)], [(1, 1.0)]], lay) == 0.5
    assert expected_recirculations([], 8) == 0.0


def _zipf_batches(rng, n, k, nnz, batches, s):
    w = np.arange(1, n + 1) ** -s
    p = w / w.sum()
    for _ in range(batches):
        ranks = rng.choice(n, size=nnz, replace=False, p=p)
        yield sorted(int(r) for r in ranks if r < k)


def test_heat_beats_random_at_95th_percentile():
    m, k = 64, 3000
    heat, rand = [], []
    for trial in range(100):
        rng = np.random.default_rng(trial)
        (hot,) = _zipf_batches(rng, 10_000, k, 600, 1, 0.8)
        G = [(i, 1.0) for i in hot]
        heat_lay = RegisterLayout(m, k // m + 1, k)
        rand_lay = RegisterLayout(m, k // m + 1, k, LayoutMode.RANDOM, trial)
        heat.append(expected_recirculations(package_gradients(G, m).packets, heat_lay))
        rand.append(expected_recirculations(package_sequential(G).packets, rand_lay))
    assert np.percentile(heat, 95) <= np.percentile(rand, 95)
    assert np.mean(heat) < np.mean(rand)
