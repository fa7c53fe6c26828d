"""Metrics assembly, versioned JSON reports, CSV timeseries, and figures.

Reports validate against the schema shipped in-package. Everything except
the `meta` block is deterministic for a given (config, seed); rerunning a
command must produce byte-identical output modulo `meta`.

The report path also renders matplotlib figures next to the delimited
output (throughput timeline, policy comparison bars, latency histogram);
pass --no-figures to skip them.
"""

from __future__ import annotations

import csv
import json
import statistics
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .transport import qp_memory_footprint
from .workloads import RunResult, TxReport

SCHEMA_VERSION = "varuna-sim-report/v1"
DEFAULT_BIN_NS = 100_000


def load_schema() -> dict:
    with resources.files("varuna_sim.schema").joinpath("report_v1.json").open() as fh:
        return json.load(fh)


def validate_report(report: dict) -> None:
    jsonschema.validate(report, load_schema())


def latency_summary(latencies_ns: list[int]) -> dict:
    if not latencies_ns:
        return {"mean_ns": 0, "p50_ns": 0, "p99_ns": 0, "buckets": []}
    ordered = sorted(latencies_ns)
    buckets: dict[int, int] = {}
    for value in ordered:
        bound = 1 << max(value - 1, 1).bit_length()
        buckets[bound] = buckets.get(bound, 0) + 1
    return {
        "mean_ns": statistics.fmean(ordered),
        "p50_ns": percentile(ordered, 0.50),
        "p99_ns": percentile(ordered, 0.99),
        "buckets": [[bound, count] for bound, count in sorted(buckets.items())],
    }


def percentile(ordered: list[int], q: float) -> float:
    if not ordered:
        return 0.0
    idx = min(len(ordered) - 1, max(0, round(q * (len(ordered) - 1))))
    return float(ordered[idx])


def log_memory_bytes(result: RunResult) -> int:
    runtime = result.world.runtime
    if not runtime.vqps or not next(iter(runtime.vqps.values())).log_locally:
        return 0
    return len(runtime.vqps) * runtime.log_capacity * 8


def run_report(result: RunResult, payload_bytes: Optional[int] = None,
               tx: Optional[TxReport] = None) -> dict:
    """One run's metrics block (shared by every command)."""
    eo = result.exactly_once()
    world = result.world
    report = {
        "policy": result.policy,
        "seed": result.seed,
        "post_failure_ratio": result.post_failure_ratio() if result.failure_times else None,
        "bytes_retransmitted": world.runtime.metrics.bytes_retransmitted,
        "recovery_duration_ns": result.recovery_duration_ns(),
        "first_resume_time_ns": result.first_resume_ns() if result.failure_times else None,
        "detection_latency_ns": (result.detection_time() - result.failure_times[0]
                                 if result.failure_times and result.detection_time() is not None
                                 else None),
        "qp_memory_bytes": qp_memory_footprint(world.requester.qps.values()),
        "log_memory_bytes": log_memory_bytes(result),
        "inconsistencies": len(eo.violations),
        "duplicate_commits": eo.duplicate_cas + eo.duplicate_writes,
        "corner_case_writes": len(result.corner_case_write_uids())
        if result.failure_times else 0,
        "committed_app_bytes": result.committed_app_bytes(),
        "log_packets": world.runtime.metrics.log_packets,
        "log_bytes": world.runtime.metrics.log_bytes,
        "app_ops": len(result.log.ops),
        "completed_clients": result.completed_clients,
        "latency": latency_summary(result.latencies_ns()),
    }
    if payload_bytes is not None:
        report["payload_bytes"] = payload_bytes
    if tx is not None:
        report["tx_committed"] = tx.committed
        report["tx_aborted"] = tx.aborted
        report["lock_leaks"] = tx.lock_leaks
        report["lost_updates"] = tx.lost_updates
        report["inconsistencies"] = tx.inconsistencies
    return report


def check_guarantees(result: RunResult) -> list[str]:
    """Violations of properties the simulator or the policy guarantees."""
    problems = list(result.world.self_check())
    if result.policy == "varuna":
        eo = result.exactly_once()
        problems.extend(f"varuna guarantee broken: {v}" for v in eo.violations)
    return problems


AGGREGATE_FIELDS = (
    "post_failure_ratio", "bytes_retransmitted", "recovery_duration_ns",
    "first_resume_time_ns", "committed_app_bytes", "inconsistencies",
    "duplicate_commits",
)


def aggregate_runs(runs: list[dict]) -> dict:
    out: dict = {}
    for key in AGGREGATE_FIELDS:
        values = [r[key] for r in runs if r.get(key) is not None]
        if not values:
            continue
        ordered = sorted(values)
        out[key] = {
            "mean": statistics.fmean(values),
            "p50": percentile(ordered, 0.50),
            "p99": percentile(ordered, 0.99),
        }
    return out


class ReportWriter:
    """Writes the JSON report plus CSV timeseries and figures beside it."""

    def __init__(self, out_path: Optional[str], figures: bool = True):
        self.out_path = Path(out_path) if out_path else None
        self.figures = figures and self.out_path is not None
        self.csv_files: list[str] = []
        self.figure_files: list[str] = []

    def _sibling(self, suffix: str) -> Path:
        return self.out_path.with_name(self.out_path.stem + suffix)

    def write_timeseries(self, name: str, rows: list[tuple[int, int, str]]) -> None:
        """CSV rows of (time_bin_ns, bytes_committed, policy)."""
        if self.out_path is None:
            return
        path = self._sibling(f"_{name}.csv")
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_bin_ns", "bytes_committed", "policy"])
            writer.writerows(rows)
        self.csv_files.append(path.name)

    def plot_throughput(self, name: str, series: dict[str, list[tuple[int, int]]],
                        failure_times: list[int], bin_ns: int) -> None:
        if not self.figures:
            return
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 3.2))
        for label, points in series.items():
            if not points:
                continue
            xs = [t / 1e6 for t, _ in points]
            ys = [b * 8 / bin_ns for _, b in points]  # Gbps (bits per ns)
            ax.plot(xs, ys, label=label, linewidth=1.2)
        for t in failure_times:
            ax.axvline(t / 1e6, color="red", linestyle="--", linewidth=0.8)
        ax.set_xlabel("time (ms)")
        ax.set_ylabel("committed throughput (Gbps)")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = self._sibling(f"_{name}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        self.figure_files.append(path.name)

    def plot_comparison(self, table: dict[str, dict]) -> None:
        if not self.figures:
            return
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        metrics = [("bytes_retransmitted", "retransmitted bytes"),
                   ("recovery_duration_ns", "recovery duration (ns)"),
                   ("first_resume_time_ns", "first resume (ns)"),
                   ("qp_memory_bytes", "QP memory (bytes)")]
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0))
        policies = list(table)
        for ax, (key, label) in zip(axes, metrics):
            values = [(table[p].get(key) or 0) for p in policies]
            ax.bar(range(len(policies)), values, color="steelblue")
            ax.set_xticks(range(len(policies)))
            ax.set_xticklabels(policies, rotation=30, ha="right", fontsize=8)
            ax.set_title(label, fontsize=9)
            ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        path = self._sibling("_compare.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        self.figure_files.append(path.name)

    def plot_latency_sweep(self, rows: list[dict]) -> None:
        """Mean/p99 latency against payload size for microbench sweeps."""
        if not self.figures or len({r.get("payload_bytes") for r in rows}) < 2:
            return
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        by_payload: dict[int, list[dict]] = {}
        for r in rows:
            by_payload.setdefault(r["payload_bytes"], []).append(r["latency"])
        payloads = sorted(by_payload)
        mean = [statistics.fmean(x["mean_ns"] for x in by_payload[p]) / 1000
                for p in payloads]
        p99 = [statistics.fmean(x["p99_ns"] for x in by_payload[p]) / 1000
               for p in payloads]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(payloads, mean, marker="o", label="mean")
        ax.plot(payloads, p99, marker="s", label="p99")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("payload (bytes)")
        ax.set_ylabel("latency (us)")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = self._sibling("_latency.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        self.figure_files.append(path.name)

    def finish(self, report: dict) -> dict:
        report["artifacts"] = {"timeseries_csv": self.csv_files,
                               "figures": self.figure_files}
        validate_report(report)
        if self.out_path is not None:
            self.out_path.write_text(canonical_json(report) + "\n")
        return report


def canonical_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def strip_meta(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "meta"}
