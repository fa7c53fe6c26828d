"""Experiment configuration: JSON ingestion and validation.

Validation errors carry the offending field path so the CLI can point at
the exact line of a bad config (exit code 2).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .failover import PoolPolicy
from .simnet import FailureEvent, FailureKind
from .workloads import FailureSpec, MicrobenchSpec, TxWorkloadSpec
from .world import LinkSpec, WorldParams

POLICIES = ("no-backup", "resend", "resend-cache", "varuna")


class ConfigError(Exception):
    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


def _get(d: dict, key: str, path: str, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return default
    return d[key]


def _number(value, path: str, minimum=None) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def parse_pool_policy(value, path: str) -> PoolPolicy:
    if isinstance(value, str):
        m = re.fullmatch(r"(fixed|ratio)\((\d+)\)", value.strip())
        if not m:
            raise ConfigError(path, "expected 'fixed(n)' or 'ratio(k)'")
        return PoolPolicy(m.group(1), int(m.group(2)))
    if isinstance(value, dict):
        kind = _get(value, "kind", path, required=True)
        if kind not in ("fixed", "ratio"):
            raise ConfigError(f"{path}.kind", "expected 'fixed' or 'ratio'")
        return PoolPolicy(kind, int(_number(_get(value, "value", path, required=True),
                                            f"{path}.value", minimum=1)))
    raise ConfigError(path, "expected a string or object")


@dataclass
class ExperimentConfig:
    links: list[LinkSpec]
    backup_order: list[str]
    policy: str
    seed: int
    workload_kind: str                      # microbench | tx
    microbench: Optional[MicrobenchSpec]
    tx: Optional[TxWorkloadSpec]
    payload_sweep: list[int]                # microbench payload values (>=1)
    failures: FailureSpec
    varuna: dict = field(default_factory=dict)
    metrics_path: Optional[str] = None
    trace_path: Optional[str] = None
    compare_policies: list[str] = field(default_factory=lambda: list(POLICIES))

    def world_params(self, policy: Optional[str] = None,
                     seed: Optional[int] = None) -> WorldParams:
        v = self.varuna
        return WorldParams(
            links=[LinkSpec(s.link_id, s.bandwidth_gbps, s.propagation_us, s.mtu)
                   for s in self.links],
            backup_order=list(self.backup_order),
            policy=policy or self.policy,
            seed=self.seed if seed is None else seed,
            log_capacity=v.get("log_capacity", 128),
            dcqp_policy=v.get("dcqp_policy", PoolPolicy("fixed", 1)),
            heartbeat_ms=v.get("heartbeat_ms", 1.0),
            heartbeat_misses=v.get("heartbeat_misses", 3),
            detection_us=v.get("detection_us"),
            handshake_delay_ms=v.get("handshake_delay_ms", 2.0),
            ah_create_delay_us=v.get("ah_create_delay_us", 100.0),
            extension_enabled=v.get("extension_enabled", True),
            confirm_period_us=v.get("confirm_period_us", 100.0),
            on_log_full=v.get("on_log_full", "error"),
            migrate_back=v.get("migrate_back", True),
        )

    def spec_for_payload(self, payload: int) -> MicrobenchSpec:
        spec = self.microbench
        return MicrobenchSpec(op_mix=spec.op_mix, payload_bytes=payload,
                              clients=spec.clients, mode=spec.mode,
                              batch_size=spec.batch_size,
                              ops_per_client=spec.ops_per_client,
                              shared_slots=spec.shared_slots)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found")
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}")
    return from_dict(raw)


def from_dict(raw: dict) -> ExperimentConfig:
    fabric = _get(raw, "fabric", "", required=True)
    links_raw = _get(fabric, "links", "fabric", required=True)
    if not isinstance(links_raw, list) or not links_raw:
        raise ConfigError("fabric.links", "expected a non-empty list")
    links = []
    seen = set()
    for i, item in enumerate(links_raw):
        path = f"fabric.links[{i}]"
        link_id = _get(item, "id", path, required=True)
        if link_id in seen:
            raise ConfigError(f"{path}.id", f"duplicate link id {link_id!r}")
        seen.add(link_id)
        links.append(LinkSpec(
            link_id=link_id,
            bandwidth_gbps=_number(_get(item, "bandwidth_gbps", path, 25.0),
                                   f"{path}.bandwidth_gbps", minimum=0.001),
            propagation_us=_number(_get(item, "propagation_us", path, 1.0),
                                   f"{path}.propagation_us", minimum=0),
            mtu=int(_number(_get(item, "mtu", path, 4096), f"{path}.mtu", minimum=1)),
        ))
    backup_order = _get(fabric, "backup_order", "fabric", [])
    for i, link_id in enumerate(backup_order):
        if link_id not in seen:
            raise ConfigError(f"fabric.backup_order[{i}]", f"unknown link {link_id!r}")

    policy = _get(raw, "policy", "", "varuna")
    if policy not in POLICIES:
        raise ConfigError("policy", f"expected one of {POLICIES}")
    if policy != "no-backup" and not backup_order:
        raise ConfigError("fabric.backup_order",
                          "must be non-empty unless policy is no-backup")

    varuna_raw = _get(raw, "varuna", "", {})
    varuna: dict[str, Any] = dict(varuna_raw)
    if "dcqp_policy" in varuna:
        varuna["dcqp_policy"] = parse_pool_policy(varuna["dcqp_policy"],
                                                  "varuna.dcqp_policy")
    if "log_capacity" in varuna:
        varuna["log_capacity"] = int(_number(varuna["log_capacity"],
                                             "varuna.log_capacity", minimum=1))

    workload = _get(raw, "workload", "", required=True)
    kind = _get(workload, "kind", "workload", required=True)
    microbench = tx = None
    payload_sweep: list[int] = []
    if kind == "microbench":
        op_mix = _get(workload, "op_mix", "workload", "write")
        if op_mix not in ("write", "cas", "cas_read_batch", "read"):
            raise ConfigError("workload.op_mix",
                              "expected write | cas | cas_read_batch | read")
        mode = _get(workload, "mode", "workload", "batched")
        if mode not in ("sync", "batched"):
            raise ConfigError("workload.mode", "expected sync | batched")
        payload_field = _get(workload, "payload_bytes", "workload", 4096)
        payloads = payload_field if isinstance(payload_field, list) else [payload_field]
        for i, p in enumerate(payloads):
            _number(p, f"workload.payload_bytes[{i}]", minimum=8)
        payload_sweep = [int(p) for p in payloads]
        microbench = MicrobenchSpec(
            op_mix=op_mix,
            payload_bytes=payload_sweep[0],
            clients=int(_number(_get(workload, "clients", "workload", 4),
                                "workload.clients", minimum=1)),
            mode=mode,
            batch_size=int(_number(_get(workload, "batch_size", "workload", 64),
                                   "workload.batch_size", minimum=1)),
            ops_per_client=int(_number(_get(workload, "ops_per_client", "workload", 128),
                                       "workload.ops_per_client", minimum=1)),
            shared_slots=int(_number(_get(workload, "shared_slots", "workload", 4),
                                     "workload.shared_slots", minimum=1)),
        )
        capacity = varuna.get("log_capacity", 128)
        window = microbench.batch_size if mode == "batched" else 1
        if window > capacity:
            raise ConfigError("workload.batch_size",
                              f"exceeds request-log capacity {capacity}")
    elif kind == "tx":
        skew = _get(workload, "skew", "workload", "uniform")
        if skew not in ("uniform", "zipf"):
            raise ConfigError("workload.skew", "expected uniform | zipf")
        tx = TxWorkloadSpec(
            table_size=int(_number(_get(workload, "table_size", "workload", 16),
                                   "workload.table_size", minimum=1)),
            clients=int(_number(_get(workload, "clients", "workload", 4),
                                "workload.clients", minimum=1)),
            txs_per_client=int(_number(_get(workload, "txs_per_client", "workload", 25),
                                       "workload.txs_per_client", minimum=1)),
            skew=skew,
            zipf_s=_number(_get(workload, "zipf_s", "workload", 1.2),
                           "workload.zipf_s", minimum=0),
            lock_retry_limit=int(_number(_get(workload, "lock_retry_limit",
                                              "workload", 300),
                                         "workload.lock_retry_limit", minimum=1)),
        )
    else:
        raise ConfigError("workload.kind", "expected microbench | tx")

    failures = _parse_failures(_get(raw, "failures", "", {}), seen)

    outputs = _get(raw, "outputs", "", {})
    compare_policies = _get(raw, "compare_policies", "", list(POLICIES))
    for i, p in enumerate(compare_policies):
        if p not in POLICIES:
            raise ConfigError(f"compare_policies[{i}]", f"expected one of {POLICIES}")

    return ExperimentConfig(
        links=links,
        backup_order=list(backup_order),
        policy=policy,
        seed=int(_number(_get(raw, "seed", "", 0), "seed", minimum=0)),
        workload_kind=kind,
        microbench=microbench,
        tx=tx,
        payload_sweep=payload_sweep,
        failures=failures,
        varuna=varuna,
        metrics_path=_get(outputs, "metrics_path", "outputs"),
        trace_path=_get(outputs, "trace_path", "outputs"),
        compare_policies=list(compare_policies),
    )


def _parse_failures(raw: dict, link_ids: set) -> FailureSpec:
    spec = FailureSpec()
    for i, item in enumerate(_get(raw, "events", "failures", [])):
        path = f"failures.events[{i}]"
        link = _get(item, "link", path, required=True)
        if link not in link_ids:
            raise ConfigError(f"{path}.link", f"unknown link {link!r}")
        time_ns = int(_number(_get(item, "time_us", path, required=True),
                              f"{path}.time_us", minimum=0) * 1000)
        kind = _get(item, "kind", path, "hard")
        if kind == "hard":
            spec.events.append(FailureEvent(link, time_ns, FailureKind.HARD_DOWN))
        elif kind == "flap":
            recover = _number(_get(item, "recover_ms", path, 5.0),
                              f"{path}.recover_ms", minimum=0.000001)
            spec.events.append(FailureEvent(link, time_ns, FailureKind.FLAP,
                                            int(recover * 1_000_000)))
        else:
            raise ConfigError(f"{path}.kind", "expected hard | flap")
    rand = _get(raw, "random", "failures")
    if rand:
        link = _get(rand, "link", "failures.random", required=True)
        if link not in link_ids:
            raise ConfigError("failures.random.link", f"unknown link {link!r}")
        window = _get(rand, "window_us", "failures.random", required=True)
        if not (isinstance(window, list) and len(window) == 2):
            raise ConfigError("failures.random.window_us", "expected [start, end]")
        spec.random_count = int(_number(_get(rand, "count", "failures.random", 1),
                                        "failures.random.count", minimum=1))
        spec.window_start_us = _number(window[0], "failures.random.window_us[0]",
                                       minimum=0)
        spec.window_end_us = _number(window[1], "failures.random.window_us[1]",
                                     minimum=spec.window_start_us)
        spec.link_id = link
        spec.kind = _get(rand, "kind", "failures.random", "hard")
        if spec.kind not in ("hard", "flap"):
            raise ConfigError("failures.random.kind", "expected hard | flap")
        spec.flap_recover_ms = _number(_get(rand, "flap_recover_ms",
                                            "failures.random", 5.0),
                                       "failures.random.flap_recover_ms", minimum=0)
    return spec
