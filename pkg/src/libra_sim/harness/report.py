"""Run reports and their CSV serialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SUMMARY_COLUMNS = ("metric", "value")
RECIRC_COLUMNS = ("recirculations", "packets")
KEY_COLUMNS = ("mapped_id", "raw_id", "occurrences", "writes", "value", "oracle", "abs_error", "tolerance", "within_tol")
MIGRATION_COLUMNS = ("tick", "source", "target", "reason", "slots", "seen_entries", "fragments")
RETRANSMIT_COLUMNS = ("worker", "packets_sent", "retransmits", "acked", "pull_failures", "version_regressions")
PRECISION_COLUMNS = ("sample_rate", "seed", "k", "precision")

FAMILIES = {
    "summary": SUMMARY_COLUMNS,
    "recirculations": RECIRC_COLUMNS,
    "keys": KEY_COLUMNS,
    "migrations": MIGRATION_COLUMNS,
    "retransmits": RETRANSMIT_COLUMNS,
    "precision": PRECISION_COLUMNS,
}


@dataclass
class RunReport:
    scenario: str = ""
    seed: int = 0
    config_digest: str = ""
    summary: dict[str, Any] = field(default_factory=dict)
    recirculations: dict[int, int] = field(default_factory=dict)
    keys: list[tuple] = field(default_factory=list)
    migrations: list[tuple] = field(default_factory=list)
    retransmits: list[tuple] = field(default_factory=list)
    precision: list[tuple] = field(default_factory=list)
    aborted: str | None = None
    violations: list[str] = field(default_factory=list)
    # in-memory results for callers; not serialized
    model: dict[int, float] = field(default_factory=dict, repr=False)
    hot_state: dict[int, tuple[int, int]] = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.aborted is None and not self.violations

    def __getitem__(self, metric: str) -> Any:
        return self.summary[metric]

    def rows(self, family: str) -> list[tuple]:
        if family == "summary":
            return list(self.summary.items())
        if family == "recirculations":
            return sorted(self.recirculations.items())
        return list(getattr(self, family))


def _fmt(x: Any) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def emit_report(report: RunReport, out_dir: str | Path) -> list[Path]:
    """Write one CSV per metric family plus a MANIFEST; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for family, columns in FAMILIES.items():
        path = out / f"{family}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in report.rows(family):
                w.writerow([_fmt(v) for v in row])
        written.append(path)
    manifest = out / "MANIFEST"
    lines = [f"config_sha256={report.config_digest}", f"seed={report.seed}", f"scenario={report.scenario}",
             f"status={'aborted' if report.aborted else ('violations' if report.violations else 'ok')}"]
    if report.aborted:
        lines.append(f"diagnostic={report.aborted}")
    lines += [f"violation={v}" for v in report.violations]
    lines += [f"file={p.name}" for p in written]
    manifest.write_text("\n".join(lines) + "\n")
    written.append(manifest)
    return written
