"""Exit criteria, each run at its stated tolerance; outcomes are summarized at the end of the session."""

import time

import numpy as np
import pytest

from libra_sim.core import SimConfig
from libra_sim.harness import WorkloadSpec, generate_workload, run_experiment
from libra_sim.harness.runner import identify
from libra_sim.harness.workload import iter_pairs
from libra_sim.hotid import count_frequencies, identification_precision, top_k
from libra_sim.layout import (LayoutMode, RegisterLayout, expected_recirculations, package_gradients,
                              package_sequential)
from libra_sim.lns import (accuracy, build_tables, choose_global_scale, f2i_add, f2i_convert, f2i_restore,
                           float_to_lns, lns_add, lns_to_float, random_binary32, relative_error, uniform_binary32)

pytestmark = pytest.mark.acceptance

N_PAIRS = 100_000
F2I_MEDIAN, F2I_MEAN = 0.3679, 0.6246  # reference float-to-integer accuracies


@pytest.fixture(scope="module")
def tables():
    return build_tables(8)


def _pairs(gen, seed):
    rng = np.random.default_rng(seed)
    return gen(rng, N_PAIRS).astype(float).tolist(), gen(rng, N_PAIRS).astype(float).tolist()


def _lns_errors(xs, ys, t):
    return np.array([relative_error(lns_to_float(lns_add(float_to_lns(a, t), float_to_lns(b, t), t), t), a + b)
                     for a, b in zip(xs, ys)])


@pytest.fixture(scope="module")
def r2_pairs():
    return _pairs(random_binary32, 1)


@pytest.fixture(scope="module")
def lns_r2(r2_pairs, tables):
    start = time.perf_counter()
    err = _lns_errors(*r2_pairs, tables)
    return err, time.perf_counter() - start


def test_c1_lns_accuracy(lns_r2, tables, record):
    err, elapsed = lns_r2
    score = np.array([accuracy(r, "linear") for r in err])
    med, mean = float(np.median(score)), float(score.mean())
    ok = med >= 0.999 and mean >= 0.997 and elapsed < 10
    record("C1", ok, f"LNS R2 median {med:.5f} (>=0.999) mean {mean:.5f} (>=0.997) in {elapsed:.1f}s (<10s)")
    # reading "(-1,1)" as linearly uniform reals instead of random bit patterns; reported, not gated
    uerr = _lns_errors(*_pairs(uniform_binary32, 2), tables)
    uscore = np.maximum(0.0, 1.0 - uerr)
    record("C1-uniform", None, f"uniform-real pairs median {np.median(uscore):.5f} mean {uscore.mean():.5f}")
    assert ok


def test_c2_float_to_int_contrast(r2_pairs, lns_r2, record):
    xs, ys = r2_pairs
    scale = choose_global_scale(zip(xs, ys))
    err = np.array([relative_error(f2i_restore(f2i_add(f2i_convert(a, scale), f2i_convert(b, scale)), scale), a + b)
                    for a, b in zip(xs, ys)])
    score = np.exp(-err)
    lscore = np.exp(-lns_r2[0])
    med, mean = float(np.median(score)), float(score.mean())
    ok = (med <= 0.70 and np.median(lscore) > med and lscore.mean() > mean
          and abs(med - F2I_MEDIAN) <= 0.20 and abs(mean - F2I_MEAN) <= 0.20)
    record("C2", ok, f"f2i median {med:.4f} mean {mean:.4f} (ref {F2I_MEDIAN}/{F2I_MEAN} +-0.20), "
                     f"LNS {np.median(lscore):.4f}/{lscore.mean():.4f}")
    assert ok


def test_c3_table_memory(tables, record):
    ok = tables.nbytes == 418_304
    record("C3", ok, f"LnsTables.nbytes = {tables.nbytes} (== 418304)")
    assert ok


def test_c4_recirculation_ordering(record):
    start = time.perf_counter()
    spec = WorkloadSpec(n_params=100_000, zipf_s=1.1, batches_per_worker=5, nonzero_per_batch=5000, num_workers=4)
    heat, rnd = [], []
    for seed in range(20):
        wl = generate_workload(spec, seed)
        hot = top_k(count_frequencies(iter_pairs(wl)), 30_000)
        imap = hot.index_map
        hl = RegisterLayout(64, 512, hot.k)
        rl = RegisterLayout(64, 512, hot.k, LayoutMode.RANDOM, seed)
        hp, rp = [], []
        for b in wl:
            G = sorted((imap[k], v) for k, v in b.pairs if k in imap)
            hp += package_gradients(G, 64, 22, hl.register_fn()).packets
            rp += package_sequential(G).packets
        heat.append(expected_recirculations(hp, hl))
        rnd.append(expected_recirculations(rp, rl))
    elapsed = time.perf_counter() - start
    h, r = float(np.mean(heat)), float(np.mean(rnd))
    ok = max(heat) < 1.0 and all(ri >= 3 * hi for ri, hi in zip(rnd, heat)) and elapsed < 60
    record("C4", ok, f"heat mean {h:.4f} (max {max(heat):.4f}, <1), random mean {r:.3f} (>=3x per seed) "
                     f"in {elapsed:.1f}s (<60s)")
    assert ok


def test_c5_hot_id_precision(record):
    # long trace of small batches: precision is governed by how many rows a sample holds
    spec = WorkloadSpec(n_params=100_000, zipf_s=1.1, batches_per_worker=400, nonzero_per_batch=200, num_workers=16)
    cfg = SimConfig()
    prec = {0.04: [], 0.08: []}
    ks = []
    for seed in range(10):
        wl = generate_workload(spec, seed)
        full = identify(cfg, wl, seed, sample_rate=1.0)
        ks.append(full.k)
        for rate in prec:
            prec[rate].append(identification_precision(full, identify(cfg, wl, seed, sample_rate=rate)))
    p4, p8 = float(np.median(prec[0.04])), float(np.median(prec[0.08]))
    ok = p4 >= 0.8 and p8 >= 0.9
    record("C5", ok, f"median precision 4% {p4:.3f} (>=0.8), 8% {p8:.3f} (>=0.9), full-trace k~{int(np.median(ks))}")
    assert ok


# full-scale pipeline runs: 16 workers x 50 batches x 1250 pairs = 10^6 pairs -------------------

@pytest.fixture(scope="module")
def trace():
    return generate_workload(WorkloadSpec(), 1)


@pytest.fixture(scope="module")
def libra(trace):
    return run_experiment(SimConfig(), trace, "LIBRA", seed=1)


def _clean(rep) -> bool:
    S = rep.summary
    return (rep.ok and S["write_count_mismatches"] == 0 and S["cold_value_mismatches"] == 0
            and S["hot_out_of_tolerance"] == 0 and S["keys_missing_from_model"] == 0)


def test_c6_exactly_once_under_loss(trace, record):
    rep = run_experiment(SimConfig(), trace, "LOSSY(0.001)", seed=1)
    S = rep.summary
    ok = _clean(rep) and S["pairs"] == 10**6 and S["packets_lost"] > 0
    record("C6", ok, f"{S['pairs']} pairs, {S['packets_lost']} lost, {S['retransmits']} retransmits; "
                     f"write mismatches {S['write_count_mismatches']}, cold mismatches {S['cold_value_mismatches']}, "
                     f"hot out of tol {S['hot_out_of_tolerance']}, aborted={rep.aborted}")
    assert ok


def test_c7_failover_equivalence(trace, libra, record):
    kill = max(b.tick for b in trace) // 2 + 3
    rep = run_experiment(SimConfig(), trace, f"FAILOVER({kill})", seed=1)
    a, b = libra.hot_state, rep.hot_state
    beyond = [m for m in a if a[m] != b.get(m) and (a[m][0] != b[m][0] or abs(a[m][1] - b[m][1]) > 1)]
    differing = sum(a[m] != b.get(m) for m in a)
    ok = rep.ok and len(rep.migrations) == 1 and not beyond and set(a) == set(b)
    record("C7", ok, f"kill at tick {kill}: {len(rep.migrations)} migration, {differing} keys differ, "
                     f"{len(beyond)} beyond one LNS step over {len(a)} hot keys")
    assert ok


def test_c8_traffic_reduction(trace, libra, record):
    base = run_experiment(SimConfig(), trace, "BASELINE_PS_ONLY", seed=1)
    ratio = libra["ps_gradient_payload_bytes"] / base["ps_gradient_payload_bytes"]
    expected = 1 - libra["coverage"]
    rel = abs(ratio - expected) / expected
    ok = rel <= 0.05 and base["switch_writes_all"] == 0
    record("C8", ok, f"PS payload ratio {ratio:.4f} vs 1-coverage {expected:.4f}: {rel:.1%} off (<=5%)")
    assert ok


def test_c9_declared_not_reproducible(record):
    record("C9", None, "declared: hardware throughput, speedup, negotiation delay and stage counts not simulated")
    pytest.skip("hardware-bound results are out of scope for a desk-scale simulator")
