"""Command-line harness.

    varuna-sim microbench --config cfg.json [--seeds N] [--out report.json]
    varuna-sim txbench    --config cfg.json [--seeds N] [--out report.json]
    varuna-sim compare    --config cfg.json [--policies a,b] [--out report.json]

Common flags: --trace-out <ndjson> dumps the per-dispatch fabric trace,
--no-figures skips figure rendering, and VARUNA_SIM_SEED overrides the
config seed. Exit codes: 0 success, 2 config error, 3 a guaranteed
invariant was violated.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from typing import Optional

from .config import POLICIES, ConfigError, ExperimentConfig, load_config
from .report import (
    DEFAULT_BIN_NS,
    ReportWriter,
    aggregate_runs,
    canonical_json,
    check_guarantees,
    run_report,
)
from .workloads import RunResult, run_microbench, run_tx_workload

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varuna-sim",
        description="Deterministic failure-type-aware RDMA failover simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("microbench", "one-sided write/CAS microbenchmarks"),
                        ("txbench", "lock-based transactional workload"),
                        ("compare", "run several policies on one schedule")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--seeds", type=int, default=1,
                       help="fan out into N seeded runs (seed, seed+1, ...)")
        p.add_argument("--out", help="report JSON path (CSV/figures go beside it)")
        p.add_argument("--trace-out", help="newline-delimited JSON dispatch trace")
        p.add_argument("--no-figures", action="store_true",
                       help="emit data only, skip figure rendering")
        if name == "compare":
            p.add_argument("--policies",
                           help=f"comma-separated subset of {','.join(POLICIES)}")
    return parser


def effective_seed(config: ExperimentConfig) -> int:
    env = os.environ.get("VARUNA_SIM_SEED")
    return int(env) if env else config.seed


def _write_trace(result: RunResult, path: str) -> None:
    log = result.world.clock.dispatch_log or []
    with open(path, "w") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _meta() -> dict:
    return {"created_at": datetime.datetime.now(datetime.timezone.utc).isoformat()}


def cmd_microbench(config: ExperimentConfig, seeds: int, out: Optional[str],
                   trace_out: Optional[str], figures: bool) -> tuple[dict, int]:
    base_seed = effective_seed(config)
    writer = ReportWriter(out, figures)
    runs = []
    problems: list[str] = []
    series = {}
    failure_times: list[int] = []
    for payload in config.payload_sweep:
        spec = config.spec_for_payload(payload)
        for i in range(seeds):
            seed = base_seed + i
            result = run_microbench(config.world_params(seed=seed), spec,
                                    config.failures, seed,
                                    trace_dispatches=trace_out is not None)
            runs.append(run_report(result, payload_bytes=payload))
            problems.extend(check_guarantees(result))
            if trace_out and payload == config.payload_sweep[0] and i == 0:
                _write_trace(result, trace_out)
            if i == 0:
                series[f"{payload}B"] = result.throughput_timeseries(DEFAULT_BIN_NS)
                failure_times = result.failure_times
    rows = [(t, b, config.policy)
            for label, points in series.items() for t, b in points]
    writer.write_timeseries("throughput", rows)
    writer.plot_throughput("throughput", series, failure_times, DEFAULT_BIN_NS)
    writer.plot_latency_sweep(runs)
    report = {
        "schema_version": "varuna-sim-report/v1",
        "command": "microbench",
        "config_seed": base_seed,
        "seeds": seeds,
        "runs": runs,
        "aggregate": aggregate_runs(runs),
        "invariant_violations": problems,
        "meta": _meta(),
    }
    return writer.finish(report), EXIT_INVARIANT if problems else EXIT_OK


def cmd_txbench(config: ExperimentConfig, seeds: int, out: Optional[str],
                trace_out: Optional[str], figures: bool) -> tuple[dict, int]:
    base_seed = effective_seed(config)
    writer = ReportWriter(out, figures)
    runs = []
    problems: list[str] = []
    series = {}
    failure_times: list[int] = []
    for i in range(seeds):
        seed = base_seed + i
        tx = run_tx_workload(config.world_params(seed=seed), config.tx,
                             config.failures, seed, bin_ns=DEFAULT_BIN_NS)
        runs.append(run_report(tx.result, tx=tx))
        problems.extend(check_guarantees(tx.result))
        if config.policy == "varuna" and (tx.lock_leaks or tx.lost_updates):
            problems.append(
                f"seed {seed}: varuna tx run leaked locks or lost updates")
        if i == 0:
            series[config.policy] = tx.throughput
            failure_times = tx.result.failure_times
            if trace_out:
                _write_trace(tx.result, trace_out)
    rows = [(t, b, config.policy) for t, b in series.get(config.policy, [])]
    writer.write_timeseries("throughput", rows)
    writer.plot_throughput("throughput", series, failure_times, DEFAULT_BIN_NS)
    report = {
        "schema_version": "varuna-sim-report/v1",
        "command": "txbench",
        "config_seed": base_seed,
        "seeds": seeds,
        "runs": runs,
        "aggregate": aggregate_runs(runs),
        "invariant_violations": problems,
        "meta": _meta(),
    }
    return writer.finish(report), EXIT_INVARIANT if problems else EXIT_OK


def cmd_compare(config: ExperimentConfig, policies: list[str], seeds: int,
                out: Optional[str], trace_out: Optional[str],
                figures: bool) -> tuple[dict, int]:
    if len(policies) < 2:
        raise ConfigError("compare_policies", "need at least two policies")
    base_seed = effective_seed(config)
    writer = ReportWriter(out, figures)
    problems: list[str] = []
    comparison: dict[str, dict] = {}
    runs = []
    series: dict[str, list[tuple[int, int]]] = {}
    failure_times: list[int] = []
    for policy in policies:
        per_policy = []
        for i in range(seeds):
            seed = base_seed + i
            if config.workload_kind == "tx":
                tx = run_tx_workload(config.world_params(policy=policy, seed=seed),
                                     config.tx, config.failures, seed,
                                     bin_ns=DEFAULT_BIN_NS)
                result, block = tx.result, run_report(tx.result, tx=tx)
                if i == 0:
                    series[policy] = tx.throughput
            else:
                spec = config.spec_for_payload(config.payload_sweep[0])
                result = run_microbench(config.world_params(policy=policy, seed=seed),
                                        spec, config.failures, seed)
                block = run_report(result, payload_bytes=config.payload_sweep[0])
                if i == 0:
                    series[policy] = result.throughput_timeseries(DEFAULT_BIN_NS)
            problems.extend(check_guarantees(result))
            per_policy.append(block)
            runs.append(block)
            if i == 0:
                failure_times = result.failure_times
        comparison[policy] = per_policy[0] if seeds == 1 else \
            {**per_policy[0], "aggregate": aggregate_runs(per_policy)}
    if "varuna" in comparison and "resend" in comparison:
        v = comparison["varuna"]["bytes_retransmitted"]
        r = comparison["resend"]["bytes_retransmitted"]
        if v > r:
            problems.append(
                f"bytes_retransmitted(varuna)={v} exceeds resend={r} "
                "for an identical (seed, schedule, workload)")
    rows = [(t, b, policy) for policy, points in series.items() for t, b in points]
    writer.write_timeseries("throughput", rows)
    writer.plot_throughput("throughput", series, failure_times, DEFAULT_BIN_NS)
    writer.plot_comparison(comparison)
    report = {
        "schema_version": "varuna-sim-report/v1",
        "command": "compare",
        "config_seed": base_seed,
        "seeds": seeds,
        "runs": runs,
        "comparison": comparison,
        "invariant_violations": problems,
        "meta": _meta(),
    }
    return writer.finish(report), EXIT_INVARIANT if problems else EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        figures = not args.no_figures
        if args.command == "microbench":
            if config.workload_kind != "microbench":
                raise ConfigError("workload.kind", "microbench command needs a "
                                                   "microbench workload")
            report, code = cmd_microbench(config, args.seeds, args.out,
                                          args.trace_out, figures)
        elif args.command == "txbench":
            if config.workload_kind != "tx":
                raise ConfigError("workload.kind", "txbench command needs a tx workload")
            report, code = cmd_txbench(config, args.seeds, args.out,
                                       args.trace_out, figures)
        else:
            policies = (args.policies.split(",") if args.policies
                        else config.compare_policies)
            for p in policies:
                if p not in POLICIES:
                    raise ConfigError("--policies", f"unknown policy {p!r}")
            report, code = cmd_compare(config, policies, args.seeds, args.out,
                                       args.trace_out, figures)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.out:
        print(canonical_json(report))
    else:
        print(f"report written to {args.out}")
    if code == EXIT_INVARIANT:
        print("invariant violations detected:", file=sys.stderr)
        for item in report["invariant_violations"]:
            print(f"  - {item}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
