"""Workload generators, failure schedules, and the ground-truth oracle.

The oracle consumes only the responder-side ExecutionTrace (never any
failover-module state), so classification and exactly-once comparisons are
non-circular. Clients are logical actors multiplexed on the event loop; a
"16 client threads" configuration maps to 16 actors.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .failover import AppCompletion, VirtualQP
from .simnet import ExecutionTrace, FailureEvent, FailureKind, OpKind, replay_trace
from .transport import WorkRequest
from .world import World, WorldParams

WRITE_STAMP_TAG = 0xA5
NON_IDEMPOTENT = (OpKind.WRITE, OpKind.CAS, OpKind.FAA, OpKind.SEND)


@dataclass
class MicrobenchSpec:
    op_mix: str = "write"            # write | cas | cas_read_batch | read
    payload_bytes: int = 4096
    clients: int = 4
    mode: str = "batched"            # sync | batched
    batch_size: int = 64
    ops_per_client: int = 128
    shared_slots: int = 4            # contended CAS targets


@dataclass
class TxWorkloadSpec:
    table_size: int = 16
    clients: int = 4
    txs_per_client: int = 25
    skew: str = "uniform"            # uniform | zipf
    zipf_s: float = 1.2
    lock_retry_limit: int = 300


@dataclass
class FailureSpec:
    """Either a fixed list of events or seeded uniform-random injection."""

    events: list[FailureEvent] = field(default_factory=list)
    random_count: int = 0
    window_start_us: float = 0.0
    window_end_us: float = 0.0
    link_id: str = ""
    kind: str = "hard"               # hard | flap
    flap_recover_ms: float = 5.0

    def materialize(self, seed: int) -> list[FailureEvent]:
        out = list(self.events)
        if self.random_count:
            rng = random.Random(f"{seed}|failures")
            lo = int(self.window_start_us * 1000)
            hi = max(lo + 1, int(self.window_end_us * 1000))
            times = sorted(rng.randrange(lo, hi) for _ in range(self.random_count))
            for t in times:
                if self.kind == "flap":
                    out.append(FailureEvent(self.link_id, t, FailureKind.FLAP,
                                            int(self.flap_recover_ms * 1_000_000)))
                else:
                    out.append(FailureEvent(self.link_id, t, FailureKind.HARD_DOWN))
        return out


@dataclass
class OpRecord:
    op_uid: int
    wr_id: int
    opcode: OpKind
    request_bytes: int
    post_time: int
    vqp_id: int
    remote_addr: int = 0
    compare_value: int = 0
    outcome_time: Optional[int] = None
    status: Optional[str] = None
    value: object = None
    cas_success: Optional[bool] = None
    recovered: bool = False


class WorkloadLog:
    """Requester-side record of every application op's post and outcome."""

    def __init__(self) -> None:
        self.ops: dict[int, OpRecord] = {}

    def record_post(self, wr: WorkRequest, time: int, vqp_id: int) -> None:
        if wr.op_uid in self.ops:
            return  # retransmission of an already-tracked op
        self.ops[wr.op_uid] = OpRecord(
            op_uid=wr.op_uid, wr_id=wr.wr_id, opcode=wr.opcode,
            request_bytes=wr.request_wire_bytes(), post_time=time,
            vqp_id=vqp_id, remote_addr=wr.remote_addr,
            compare_value=wr.compare_value)

    def record_outcome(self, c: AppCompletion) -> None:
        rec = self.ops.get(c.op_uid)
        if rec is None or rec.outcome_time is not None:
            return
        rec.outcome_time = c.time
        rec.status = c.status
        rec.value = c.return_value
        rec.cas_success = c.cas_success
        rec.recovered = c.recovered

    def in_flight_at(self, time: int, vqp_ids: Optional[set[int]] = None) -> list[int]:
        out = []
        for rec in self.ops.values():
            if vqp_ids is not None and rec.vqp_id not in vqp_ids:
                continue
            if rec.post_time <= time and (rec.outcome_time is None or rec.outcome_time > time):
                out.append(rec.op_uid)
        return out


# --- the oracle ---

def app_commit_records(trace: ExecutionTrace) -> dict[int, list]:
    commits: dict[int, list] = {}
    for rec in trace:
        if rec.origin == "app" and rec.op_uid is not None:
            commits.setdefault(rec.op_uid, []).append(rec)
    return commits


def _is_effectful(rec, opcode: OpKind) -> bool:
    """Did this commit count as the op's execution? Failed CAS attempts of a
    FAA rewrite are probes, not the FAA's execution."""
    if opcode is OpKind.FAA and rec.opcode is OpKind.CAS:
        compare, _ = rec.operands
        return rec.return_value == compare
    return True


def oracle_classify(trace: ExecutionTrace, failure_time: int,
                    in_flight: list[int], log: WorkloadLog) -> dict[int, str]:
    """Ground truth: an op is post-failure iff it committed before the failure."""
    commits = app_commit_records(trace)
    out: dict[int, str] = {}
    for uid in in_flight:
        opcode = log.ops[uid].opcode
        committed = any(rec.commit_time < failure_time and _is_effectful(rec, opcode)
                        for rec in commits.get(uid, []))
        out[uid] = "post" if committed else "pre"
    return out


@dataclass
class ExactlyOnceReport:
    violations: list[str] = field(default_factory=list)
    duplicate_cas: int = 0
    duplicate_writes: int = 0
    corner_write_duplicates: int = 0
    value_mismatches: int = 0

    @property
    def clean(self) -> bool:
        return not self.violations and self.duplicate_cas == 0


def oracle_check_exactly_once(trace: ExecutionTrace, log: WorkloadLog) -> ExactlyOnceReport:
    """Exactly-once and return-value agreement for non-idempotent app ops.

    For a successful CAS the recovered value must equal the commit's return
    value exactly; for a failed CAS only the executed-and-failed boolean is
    checkable (the blocking value at execution time is unrecoverable once
    the ACK is lost and the target moves on).
    """
    report = ExactlyOnceReport()
    commits = app_commit_records(trace)
    for uid, rec in sorted(log.ops.items()):
        if rec.opcode not in NON_IDEMPOTENT:
            continue
        execs = [r for r in commits.get(uid, []) if _is_effectful(r, rec.opcode)]
        ok_outcome = rec.status == "ok"
        if not execs:
            if ok_outcome and rec.opcode is not OpKind.CAS:
                report.violations.append(f"op {uid} completed ok without any commit")
            elif ok_outcome and (rec.cas_success or
                                 (rec.cas_success is None and rec.value == rec.compare_value)):
                report.violations.append(f"cas {uid} reported success without a commit")
            continue
        if len(execs) > 1:
            if rec.opcode in (OpKind.CAS, OpKind.FAA):
                report.duplicate_cas += 1
                report.violations.append(
                    f"{rec.opcode.value} {uid} executed {len(execs)} times")
            else:
                effects = {(r.addr, r.operands) for r in execs}
                if len(effects) == 1:
                    report.corner_write_duplicates += len(execs) - 1
                    report.duplicate_writes += 1
                else:
                    report.duplicate_writes += 1
                    report.violations.append(
                        f"write {uid} re-executed with differing effects")
        if rec.opcode is OpKind.CAS and ok_outcome:
            first = execs[0]
            compare, _ = first.operands
            rec_success = first.return_value == compare
            app_success = rec.cas_success if rec.cas_success is not None \
                else rec.value == rec.compare_value
            if app_success != rec_success:
                report.value_mismatches += 1
                report.violations.append(
                    f"cas {uid}: application saw "
                    f"{'success' if app_success else 'failure'}, trace says otherwise")
            elif app_success and rec.value != first.return_value:
                report.value_mismatches += 1
                report.violations.append(f"cas {uid}: return value mismatch")
        if rec.opcode is OpKind.FAA and ok_outcome:
            if rec.value != execs[0].return_value:
                report.value_mismatches += 1
                report.violations.append(f"faa {uid}: return value mismatch")
    return report


def oracle_serial_replay(trace: ExecutionTrace) -> dict[int, int]:
    return replay_trace(trace).image()


# --- microbenchmark clients ---

class MicrobenchClient:
    """One logical client actor driving one vqp."""

    def __init__(self, world: World, vqp: VirtualQP, spec: MicrobenchSpec,
                 log: WorkloadLog, client_idx: int, app_base: int, shared_base: int):
        self.world = world
        self.vqp = vqp
        self.spec = spec
        self.log = log
        self.idx = client_idx
        self.app_base = app_base          # private slot area for this client
        self.shared_base = shared_base
        self.sent = 0
        self.outstanding = 0
        self.done = False
        self.aborted = False
        vqp.on_app_completion = self.on_completion

    def start(self) -> None:
        self._post_next()

    # private 8-byte stamp: unique per op, well below the UID address range
    def _stamp(self, uid_hint: int) -> int:
        return (uid_hint << 8) | WRITE_STAMP_TAG

    def _make_ops(self, count: int) -> list[WorkRequest]:
        wrs: list[WorkRequest] = []
        for k in range(count):
            i = self.sent + k
            if self.spec.op_mix == "write":
                addr = self.app_base + (i % 8) * 8
                wrs.append(WorkRequest(
                    opcode=OpKind.WRITE, wr_id=i, remote_addr=addr,
                    payload_bytes=self.spec.payload_bytes,
                    values=(self._stamp(self.idx * 100_000 + i),), signaled=False))
            elif self.spec.op_mix == "read":
                wrs.append(WorkRequest(
                    opcode=OpKind.READ, wr_id=i,
                    remote_addr=self.app_base + (i % 8) * 8,
                    payload_bytes=self.spec.payload_bytes, signaled=False))
            elif self.spec.op_mix == "cas":
                if i % 4 == 3:
                    # contended shared slot: first winner installs its token
                    addr = self.shared_base + (i % self.spec.shared_slots) * 8
                    wrs.append(WorkRequest(
                        opcode=OpKind.CAS, wr_id=i, remote_addr=addr,
                        payload_bytes=8, compare_value=0,
                        swap_value=self.idx + 1, signaled=False))
                else:
                    # fresh private slot per op: single writer, always succeeds
                    addr = self.app_base + i * 8
                    wrs.append(WorkRequest(
                        opcode=OpKind.CAS, wr_id=i, remote_addr=addr,
                        payload_bytes=8, compare_value=0,
                        swap_value=self._stamp(self.idx * 100_000 + i),
                        signaled=False))
            else:  # cas_read_batch: one 8B CAS followed by three reads
                unit = i % 4
                if unit == 0:
                    addr = self.shared_base + (i % self.spec.shared_slots) * 8
                    wrs.append(WorkRequest(
                        opcode=OpKind.CAS, wr_id=i, remote_addr=addr,
                        payload_bytes=8, compare_value=0,
                        swap_value=self.idx + 1, signaled=False))
                else:
                    wrs.append(WorkRequest(
                        opcode=OpKind.READ, wr_id=i,
                        remote_addr=self.app_base + (unit - 1) * 8,
                        payload_bytes=max(8, self.spec.payload_bytes), signaled=False))
        return wrs

    def _post_next(self) -> None:
        if self.done or self.aborted:
            return
        remaining = self.spec.ops_per_client - self.sent
        if remaining <= 0:
            self.done = True
            return
        count = 1 if self.spec.mode == "sync" else min(self.spec.batch_size, remaining)
        wrs = self._make_ops(count)
        wrs[-1].signaled = True
        self.sent += count
        self.outstanding += count
        now = self.world.clock.now
        self.world.runtime.post_send(self.vqp, wrs)
        for wr in wrs:
            self.log.record_post(wr, now, self.vqp.vqp_id)

    def on_completion(self, c: AppCompletion) -> None:
        self.log.record_outcome(c)
        if c.status != "ok":
            self.aborted = True
        self.outstanding -= 1
        if self.outstanding == 0:
            if self.aborted:
                self.done = True
            else:
                self._post_next()


@dataclass
class RunResult:
    world: World
    log: WorkloadLog
    seed: int
    policy: str
    failure_times: list[int]
    completed_clients: int
    total_clients: int

    @property
    def trace(self) -> ExecutionTrace:
        return self.world.trace

    def exactly_once(self) -> ExactlyOnceReport:
        return oracle_check_exactly_once(self.trace, self.log)

    def replay_matches(self) -> bool:
        return oracle_serial_replay(self.trace) == self.world.responder.memory.image()

    def in_flight_at_failure(self, which: int = 0) -> list[int]:
        t = self.failure_times[which]
        affected = None
        for fr in self.world.runtime.metrics.failures:
            if fr.detect_time >= t:
                affected = set(fr.affected_vqps)
                break
        return self.log.in_flight_at(t, affected)

    def oracle_classification(self, which: int = 0) -> dict[int, str]:
        return oracle_classify(self.trace, self.failure_times[which],
                               self.in_flight_at_failure(which), self.log)

    def varuna_classification(self) -> dict[int, str]:
        merged: dict[int, str] = {}
        for report in self.world.runtime.metrics.reports:
            merged.update(report.classification)
        return merged

    def post_failure_ratio(self, which: int = 0) -> Optional[float]:
        cls = self.oracle_classification(which)
        if not cls:
            return None
        return sum(1 for v in cls.values() if v == "post") / len(cls)

    def oracle_pre_failure_bytes(self, which: int = 0) -> int:
        cls = self.oracle_classification(which)
        return sum(self.log.ops[uid].request_bytes
                   for uid, v in cls.items() if v == "pre")

    def in_flight_bytes(self, which: int = 0) -> int:
        return sum(self.log.ops[uid].request_bytes
                   for uid in self.in_flight_at_failure(which))

    def corner_case_write_uids(self, which: int = 0) -> list[int]:
        """Writes the runtime classified pre-failure that the oracle proves
        committed (their trailing 8-byte log write was lost)."""
        oracle = self.oracle_classification(which)
        varuna = self.varuna_classification()
        out = []
        for uid, verdict in oracle.items():
            if verdict == "post" and varuna.get(uid) == "pre" \
                    and self.log.ops[uid].opcode is OpKind.WRITE:
                out.append(uid)
        return out

    def committed_app_bytes(self) -> int:
        seen: set[int] = set()
        total = 0
        for rec in self.trace:
            if rec.origin == "app" and rec.op_uid is not None and rec.op_uid not in seen:
                seen.add(rec.op_uid)
                total += rec.payload_bytes if rec.opcode in (OpKind.WRITE, OpKind.SEND) \
                    else (8 if rec.opcode in (OpKind.CAS, OpKind.FAA) else 0)
        return total

    def throughput_timeseries(self, bin_ns: int = 100_000) -> list[tuple[int, int]]:
        bins: dict[int, int] = {}
        for rec in self.trace:
            if rec.origin != "app" or rec.op_uid is None:
                continue
            size = rec.payload_bytes if rec.opcode in (OpKind.WRITE, OpKind.SEND) \
                else 8 if rec.opcode in (OpKind.CAS, OpKind.FAA) else 0
            bins[rec.commit_time // bin_ns] = bins.get(rec.commit_time // bin_ns, 0) + size
        if not bins:
            return []
        last = max(bins)
        return [(b * bin_ns, bins.get(b, 0)) for b in range(0, last + 1)]

    def first_resume_ns(self, which: int = 0) -> Optional[int]:
        """First responder commit via a non-failed link after the failure."""
        t = self.failure_times[which]
        failed = self.world.runtime.metrics.failures
        failed_link = failed[which].link_id if which < len(failed) else None
        qp_links = self.world.requester.qp_links
        best = None
        for rec in self.trace:
            if rec.commit_time <= t:
                continue
            link = qp_links.get(rec.qp_id)
            if link is None or link == failed_link:
                continue
            if best is None or rec.commit_time < best:
                best = rec.commit_time
        return None if best is None else best - t

    def detection_time(self, which: int = 0) -> Optional[int]:
        failures = self.world.runtime.metrics.failures
        return failures[which].detect_time if which < len(failures) else None

    def recovery_duration_ns(self, which: int = 0) -> Optional[int]:
        """Failure to the last terminal outcome among ops in flight at it."""
        if which >= len(self.failure_times):
            return None
        t = self.failure_times[which]
        outcomes = [self.log.ops[uid].outcome_time
                    for uid in self.in_flight_at_failure(which)
                    if self.log.ops[uid].outcome_time is not None]
        if not outcomes:
            return None
        return max(outcomes) - t

    def latencies_ns(self) -> list[int]:
        return [rec.outcome_time - rec.post_time for rec in self.log.ops.values()
                if rec.outcome_time is not None and rec.status == "ok"]


def run_microbench(params: WorldParams, spec: MicrobenchSpec,
                   failures: FailureSpec, seed: int,
                   trace_dispatches: bool = False) -> RunResult:
    params.seed = seed
    world = World(params, trace_dispatches=trace_dispatches)
    area = max(8, spec.ops_per_client) * 8  # per-client private slots
    region = world.runtime.register_app_region(
        spec.clients * area + max(1, spec.shared_slots) * 8)
    shared_base = region.base_addr + spec.clients * area
    log = WorkloadLog()
    clients = []
    primary = params.links[0].link_id
    for i in range(spec.clients):
        vqp = world.runtime.create_vqp(primary, params.backup_order)
        clients.append(MicrobenchClient(world, vqp, spec, log, i,
                                        region.base_addr + i * area, shared_base))
    events = failures.materialize(seed)
    for ev in events:
        world.inject(ev)
    for client in clients:
        world.clock.schedule_call(0, "client_start", client.start)
    world.run()
    return RunResult(world=world, log=log, seed=seed, policy=params.policy,
                     failure_times=[ev.time for ev in events],
                     completed_clients=sum(1 for c in clients if c.done and not c.aborted),
                     total_clients=len(clients))


def active_span_ns(params: WorldParams, spec: MicrobenchSpec, seed: int = 0) -> tuple[int, int]:
    """(first, last) commit time of a failure-free probe run; used to aim
    failure windows at live traffic."""
    result = run_microbench(params, spec, FailureSpec(), seed)
    times = [rec.commit_time for rec in result.trace]
    return (min(times), max(times)) if times else (0, 0)


def measure_post_failure_ratio(params_factory, spec_factory, failures_factory,
                               payloads: list[int], batch_sizes: list[int],
                               seeds: int = 100) -> dict[tuple[int, int], float]:
    """Mean post-failure fraction per (payload, batch size) over seeded runs."""
    table: dict[tuple[int, int], float] = {}
    for payload in payloads:
        for batch in batch_sizes:
            failures = failures_factory(payload, batch)
            ratios = []
            for seed in range(seeds):
                spec = spec_factory(payload, batch)
                result = run_microbench(params_factory(), spec, failures, seed)
                ratio = result.post_failure_ratio()
                if ratio is not None:
                    ratios.append(ratio)
            table[(payload, batch)] = sum(ratios) / len(ratios) if ratios else 0.0
    return table


def longest_zero_gap_ns(throughput: list[tuple[int, int]], start_ns: int,
                        bin_ns: int = 100_000) -> int:
    """Longest stretch of zero committed bytes at or after start_ns."""
    best = run = 0
    for t, committed in throughput:
        if t + bin_ns <= start_ns:
            continue
        if committed == 0:
            run += bin_ns
            best = max(best, run)
        else:
            run = 0
    return best


# --- transactional workload: lock(CAS) -> read -> write -> unlock(CAS) ---

UNLOCKED = 0


class TxClient:
    def __init__(self, world: World, vqp: VirtualQP, spec: TxWorkloadSpec,
                 log: WorkloadLog, client_idx: int, table_base: int,
                 rng: random.Random):
        self.world = world
        self.vqp = vqp
        self.spec = spec
        self.log = log
        self.idx = client_idx
        self.token = client_idx + 1
        self.table_base = table_base
        self.rng = rng
        self.committed = 0
        self.aborted = 0
        self.started = 0
        self.done = False
        self.dead = False
        self.phase = "idle"
        self.row = 0
        self.lock_tries = 0
        self.read_value = 0
        vqp.on_app_completion = self.on_completion

    def _row_addrs(self) -> tuple[int, int]:
        base = self.table_base + self.row * 16
        return base, base + 8  # lock word, data word

    def _pick_row(self) -> int:
        n = self.spec.table_size
        if self.spec.skew == "zipf":
            weights = [1.0 / (k + 1) ** self.spec.zipf_s for k in range(n)]
            return self.rng.choices(range(n), weights=weights)[0]
        return self.rng.randrange(n)

    def start(self) -> None:
        self._next_tx()

    def _next_tx(self) -> None:
        if self.dead or self.started >= self.spec.txs_per_client:
            self.done = True
            return
        self.started += 1
        self.row = self._pick_row()
        self.lock_tries = 0
        self._try_lock()

    def _post(self, wr: WorkRequest) -> None:
        now = self.world.clock.now
        self.world.runtime.post_send(self.vqp, [wr])
        self.log.record_post(wr, now, self.vqp.vqp_id)

    def _try_lock(self) -> None:
        self.phase = "locking"
        self.lock_tries += 1
        lock_addr, _ = self._row_addrs()
        self._post(WorkRequest(opcode=OpKind.CAS, wr_id=self.started,
                               remote_addr=lock_addr, payload_bytes=8,
                               compare_value=UNLOCKED, swap_value=self.token))

    def on_completion(self, c: AppCompletion) -> None:
        self.log.record_outcome(c)
        if c.status != "ok":
            self.dead = True
            self.done = True
            self.aborted += self.spec.txs_per_client - self.committed
            return
        lock_addr, data_addr = self._row_addrs()
        if self.phase == "locking":
            if c.cas_success:
                self.phase = "reading"
                self._post(WorkRequest(opcode=OpKind.READ, wr_id=self.started,
                                       remote_addr=data_addr, payload_bytes=8))
            elif self.lock_tries >= self.spec.lock_retry_limit:
                self.aborted += 1
                self._next_tx()
            else:
                self._try_lock()
        elif self.phase == "reading":
            self.read_value = c.return_value[0]
            self.phase = "writing"
            self._post(WorkRequest(opcode=OpKind.WRITE, wr_id=self.started,
                                   remote_addr=data_addr, payload_bytes=8,
                                   values=(self.read_value + 1,)))
        elif self.phase == "writing":
            self.phase = "unlocking"
            self._post(WorkRequest(opcode=OpKind.CAS, wr_id=self.started,
                                   remote_addr=lock_addr, payload_bytes=8,
                                   compare_value=self.token, swap_value=UNLOCKED))
        elif self.phase == "unlocking":
            if c.cas_success:
                self.committed += 1
            else:
                self.aborted += 1  # token corrupted underneath us
            self._next_tx()


@dataclass
class TxReport:
    committed: int
    aborted: int
    lock_leaks: int
    lost_updates: int
    exactly_once_violations: int
    inconsistencies: int
    throughput: list[tuple[int, int]]
    result: RunResult


def run_tx_workload(params: WorldParams, spec: TxWorkloadSpec,
                    failures: FailureSpec, seed: int,
                    bin_ns: int = 100_000) -> TxReport:
    params.seed = seed
    world = World(params)
    table_region = world.runtime.register_app_region(spec.table_size * 16)
    log = WorkloadLog()
    primary = params.links[0].link_id
    clients = []
    for i in range(spec.clients):
        vqp = world.runtime.create_vqp(primary, params.backup_order)
        rng = random.Random(f"{seed}|tx|{i}")
        clients.append(TxClient(world, vqp, spec, log, i,
                                table_region.base_addr, rng))
    events = failures.materialize(seed)
    for ev in events:
        world.inject(ev)
    for client in clients:
        world.clock.schedule_call(0, "client_start", client.start)
    world.run()

    result = RunResult(world=world, log=log, seed=seed, policy=params.policy,
                       failure_times=[ev.time for ev in events],
                       completed_clients=sum(1 for c in clients if c.done and not c.dead),
                       total_clients=len(clients))
    committed = sum(c.committed for c in clients)
    aborted = sum(c.aborted for c in clients)
    lock_leaks = _count_lock_leaks(world, table_region.base_addr, spec, clients)
    lost_updates = _count_lost_updates(world, table_region.base_addr, spec, log)
    eo = result.exactly_once()
    inconsistencies = lock_leaks + lost_updates + len(eo.violations)
    return TxReport(committed=committed, aborted=aborted, lock_leaks=lock_leaks,
                    lost_updates=lost_updates,
                    exactly_once_violations=len(eo.violations),
                    inconsistencies=inconsistencies,
                    throughput=result.throughput_timeseries(bin_ns),
                    result=result)


def _count_lock_leaks(world: World, table_base: int, spec: TxWorkloadSpec,
                      clients: list[TxClient]) -> int:
    """Lock words still held at the end by clients that are not mid-tx."""
    mem = world.responder.memory
    live_tokens = {c.token for c in clients if not c.done}
    leaks = 0
    for row in range(spec.table_size):
        holder = mem.read(table_base + row * 16)
        if holder != UNLOCKED and holder not in live_tokens:
            leaks += 1
    return leaks


def _count_lost_updates(world: World, table_base: int, spec: TxWorkloadSpec,
                        log: WorkloadLog) -> int:
    """Each data word must equal the count of writes applied to it exactly
    once; double-applied or stale-overwriting retransmissions break this."""
    mem = world.responder.memory
    writes_per_row: dict[int, int] = {}
    for rec in log.ops.values():
        if rec.opcode is OpKind.WRITE and rec.status == "ok":
            row = (rec.remote_addr - table_base - 8) // 16
            writes_per_row[row] = writes_per_row.get(row, 0) + 1
    lost = 0
    for row in range(spec.table_size):
        expected = writes_per_row.get(row, 0)
        actual = mem.read(table_base + row * 16 + 8)
        if actual != expected:
            lost += 1
    return lost
