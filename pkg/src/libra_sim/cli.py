"""Command-line entry point: run, gen-workload, identify, tables."""

from __future__ import annotations

import argparse
import logging
import sys

from .core import ConfigError, SimConfig, load_config, validate_config
from .harness.report import emit_report
from .harness.runner import Scenario, identify, precision_sweep, run_experiment
from .harness.workload import WorkloadSpec, generate_workload, iter_pairs, read_jsonl, sample_batches, write_jsonl
from .hotid import count_frequencies
from .lns import build_tables

EXIT_OK = 0
EXIT_BREACH = 1
EXIT_USAGE = 2


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def _rates(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="libra-sim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario and write CSV reports")
    r.add_argument("--config", help="key=value config file (defaults if omitted)")
    r.add_argument("--workload", required=True, help="JSONL trace from gen-workload")
    r.add_argument("--scenario", required=True,
                   help="BASELINE_PS_ONLY, LIBRA, RANDOM_LAYOUT, LOSSY(p) or FAILOVER(kill_tick)")
    r.add_argument("--seed", type=_u64, default=None)
    r.add_argument("--out", required=True, help="report directory")
    r.add_argument("--sweep", type=_rates, default=None, metavar="R1,R2,...",
                   help="also fill precision.csv for these sampling rates")

    g = sub.add_parser("gen-workload", help="write a synthetic Zipf trace")
    g.add_argument("--params", type=int, required=True)
    g.add_argument("--zipf", type=float, required=True)
    g.add_argument("--batches", type=int, required=True, help="batches per worker")
    g.add_argument("--nnz", type=int, required=True, help="nonzero gradients per batch")
    g.add_argument("--workers", type=int, default=16)
    g.add_argument("--interval", type=int, default=100, help="ticks between a worker's batches")
    g.add_argument("--seed", type=_u64, required=True)
    g.add_argument("--out", required=True)

    i = sub.add_parser("identify", help="select the hot set from a sampled trace")
    i.add_argument("--trace", required=True)
    i.add_argument("--sample-rate", type=float, required=True)
    i.add_argument("--p", type=float, required=True, help="traffic target")
    i.add_argument("--c", type=float, required=True, help="memory fraction")
    i.add_argument("--max-k", type=int, default=None)
    i.add_argument("--seed", type=_u64, default=0)
    i.add_argument("--profile", help="also write the sampled heat profile here")
    i.add_argument("--out", required=True)

    t = sub.add_parser("tables", help="build and dump the LNS lookup tables")
    t.add_argument("--frac-bits", type=int, default=8)
    t.add_argument("--dump", required=True)
    return ap


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else SimConfig()
    validate_config(cfg)
    scenario = Scenario.parse(args.scenario)
    workload = read_jsonl(args.workload)
    report = run_experiment(cfg, workload, scenario, seed=args.seed)
    if args.sweep:
        report.precision = precision_sweep(cfg, workload, args.sweep, range(10))
    emit_report(report, args.out)
    if report.aborted:
        print(f"libra-sim: run aborted: {report.aborted}", file=sys.stderr)
        return EXIT_BREACH
    for v in report.violations:
        print(f"libra-sim: invariant breach: {v}", file=sys.stderr)
    return EXIT_BREACH if report.violations else EXIT_OK


def _cmd_gen(args) -> int:
    spec = WorkloadSpec(args.params, args.zipf, args.batches, args.nnz, args.workers, batch_interval=args.interval)
    write_jsonl(generate_workload(spec, args.seed), args.out)
    return EXIT_OK


def _cmd_identify(args) -> int:
    # without --max-k only the memory condition bounds k
    cfg = SimConfig(traffic_target=args.p, memory_fraction=args.c, sample_rate=args.sample_rate,
                    hot_k=args.max_k if args.max_k is not None else 2**62)
    batches = read_jsonl(args.trace)
    hot = identify(cfg, batches, args.seed)
    hot.to_csv(args.out)
    if args.profile:
        count_frequencies(iter_pairs(sample_batches(batches, args.sample_rate, args.seed))).to_csv(args.profile)
    print(f"k={hot.k} coverage={hot.coverage:.4f}{' (clamped)' if hot.clamped else ''}")
    return EXIT_OK


def _cmd_tables(args) -> int:
    tables = build_tables(args.frac_bits)
    tables.dump(args.dump)
    print(f"frac_bits={tables.frac_bits} bytes={tables.nbytes}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "gen-workload": _cmd_gen, "identify": _cmd_identify, "tables": _cmd_tables}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"libra-sim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
