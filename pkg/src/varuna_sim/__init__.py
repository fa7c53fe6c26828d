"""Deterministic simulator for failure-type-aware RDMA failover.

A discrete-event multi-link fabric with an exact responder commit trace,
a verbs-like transport (QPs, PSN dedup, per-NIC rkeys), the dual-log /
extended-CAS / DCQP-pool failover mechanism, three baseline recovery
policies, workload generators, and a ground-truth oracle.
"""

from .failover import (
    AppCompletion,
    FailoverRuntime,
    LogFull,
    NoBackupLink,
    PoolPolicy,
    RecoveryVerdict,
    UnifiedRequestId,
    VirtualQP,
    decode_log_entry,
    decode_uid,
    encode_log_entry,
    encode_uid,
)
from .policies import POLICY_KINDS, hazard_probe, make_policy
from .simnet import (
    ExecutionTrace,
    FailureEvent,
    FailureKind,
    OpKind,
    SimClock,
    replay_trace,
)
from .transport import PostError, WorkRequest
from .workloads import (
    FailureSpec,
    MicrobenchSpec,
    TxWorkloadSpec,
    oracle_check_exactly_once,
    oracle_classify,
    oracle_serial_replay,
    run_microbench,
    run_tx_workload,
)
from .world import LinkSpec, World, WorldParams

__version__ = "0.1.0"
