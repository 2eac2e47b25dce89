"""Workload generation, network simulation, experiment runner and reports."""

from .network import LinkModel, Network
from .report import RunReport, emit_report
from .runner import InvariantBreach, Oracle, Scenario, ScenarioKind, run_experiment
from .workload import Batch, WorkloadSpec, generate_workload, read_jsonl, sample_batches, write_jsonl

__all__ = ["Batch", "InvariantBreach", "LinkModel", "Network", "Oracle", "RunReport", "Scenario", "ScenarioKind",
           "WorkloadSpec", "emit_report", "generate_workload", "read_jsonl", "run_experiment", "sample_batches",
           "write_jsonl"]
