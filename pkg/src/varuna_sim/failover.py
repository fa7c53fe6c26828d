"""Failure-type-aware failover over virtual QPs.

Dual 8-byte logs (requester request log, responder completion log written
by piggybacked inline one-sided writes), extended-status two-stage CAS with
64-bit UIDs, DCQP-pool switchover with an atomic batched remap, recovery
scan, and swap-back to rebuilt RCQPs.

Log entry layout (8 bytes): handle in the low 48 bits, a 15-bit timestamp
at bits 48..62, and a finished flag at bit 63. The all-zero value means
"empty slot". A UID packs a 48-bit CAS-buffer slot address above a 16-bit
QP id; the responder discriminates UIDs from application values by slot
address-range membership, so applications whose legitimate 8-byte values
could fall inside that range must disable the extension.

The slot write and the UID-CAS of an extended operation share a doorbell
and travel as one fused wire packet, which makes the recovery decision
table total: UID at target or finished slot record => executed and
succeeded; slot record present but unfinished => executed and returned
false; slot record absent => never executed, safe to retransmit.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .simnet import Fabric, LinkState, OpKind, SimClock
from .transport import (
    MemoryRegion,
    PhysicalQP,
    PostedOp,
    PostError,
    QpKind,
    QpState,
    Requester,
    Responder,
    WorkRequest,
    wr_chain_to_list,
)

HANDLE_BITS = 48
HANDLE_MASK = (1 << HANDLE_BITS) - 1
TS_BITS = 15
TS_MASK = (1 << TS_BITS) - 1
FINISHED_BIT = 1 << 63
ENTRY_MATCH_MASK = FINISHED_BIT - 1  # handle + timestamp, finished flag masked

DEFAULT_LOG_CAPACITY = 128
CAS_SLOT_BYTES = 16  # swap value word + completion record word
FAA_RETRY_LIMIT = 16
FAA_UID_BACKOFF = 50_000  # ns to wait before re-reading an occupied target


class FieldOverflow(Exception):
    """A log-entry or UID field exceeds its bit width."""


class LogFull(Exception):
    """The request-log ring window would exceed capacity."""


class CasBufferFull(Exception):
    """No free CAS-buffer slot for an extended operation."""


class NoBackupLink(Exception):
    """The configured backup-link list is exhausted."""


class AmbiguousState(Exception):
    """CAS recovery observables admit no verdict; impossible under the
    protocol ordering, so raising this fails the suite."""


def encode_log_entry(handle: int, timestamp: int, finished: int) -> int:
    if not 0 <= handle <= HANDLE_MASK:
        raise FieldOverflow(f"handle {handle:#x} exceeds {HANDLE_BITS} bits")
    if not 0 <= timestamp <= TS_MASK:
        raise FieldOverflow(f"timestamp {timestamp} exceeds {TS_BITS} bits")
    if finished not in (0, 1):
        raise FieldOverflow("finished flag must be 0 or 1")
    return handle | (timestamp << HANDLE_BITS) | (finished << 63)


def decode_log_entry(value: int) -> tuple[int, int, int]:
    return value & HANDLE_MASK, (value >> HANDLE_BITS) & TS_MASK, (value >> 63) & 1


def entries_match(a: int, b: int) -> bool:
    """Handle+timestamp equality; the finished bit does not participate."""
    return a != 0 and (a & ENTRY_MATCH_MASK) == (b & ENTRY_MATCH_MASK)


def encode_uid(slot_addr: int, qp_id: int) -> int:
    if not 0 <= slot_addr <= HANDLE_MASK:
        raise FieldOverflow(f"slot address {slot_addr:#x} exceeds 48 bits")
    if not 0 <= qp_id < (1 << 16):
        raise FieldOverflow(f"qp id {qp_id} exceeds 16 bits")
    return (slot_addr << 16) | qp_id


def decode_uid(value: int) -> tuple[int, int]:
    return value >> 16, value & 0xFFFF


@dataclass(frozen=True)
class UnifiedRequestId:
    """Fallback request identity when application wr_ids are not unique."""

    entry_handle: int
    timestamp: int


class VqpState(Enum):
    ACTIVE = "active"
    DEAD = "dead"


@dataclass
class AppCompletion:
    """Application-visible terminal outcome of one posted operation."""

    wr_id: int
    unified_id: Optional[UnifiedRequestId]
    op_uid: Optional[int]
    status: str                  # ok | error:<kind>
    return_value: object
    recovered: bool
    vqp_id: int
    time: int
    signaled: bool
    # typed CAS verdict: a recovered CAS that executed-and-failed may observe
    # a current value equal to its compare value, so success is stated
    # explicitly instead of being inferred from the returned value
    cas_success: Optional[bool] = None


class RecoveryVerdict(Enum):
    SUCCESS = "success"
    FAILED = "failed"
    NOT_EXECUTED = "not_executed"


@dataclass
class LoggedRequest:
    """Side-table copy of a logged work request plus its protocol state."""

    handle: int
    timestamp: int
    ring_index: int
    post_seq: int
    wr: WorkRequest
    orig_signaled: bool
    finished: bool = False
    acked: bool = False     # wire result arrived; freed only at CQE granularity
    extended: bool = False
    slot_addr: Optional[int] = None
    uid: Optional[int] = None
    faa_attempts: int = 0
    faa_compare: int = 0
    faa_read_wr: Optional[WorkRequest] = None

    def entry_value(self, finished: int = 0) -> int:
        return encode_log_entry(self.handle, self.timestamp, finished)

    def unified_id(self) -> UnifiedRequestId:
        return UnifiedRequestId(self.handle, self.timestamp)


@dataclass
class UnloggedOp:
    post_seq: int
    wr: WorkRequest
    acked: bool = False


@dataclass
class ConnTableEntry:
    primary_rcqp: Optional[PhysicalQP] = None
    current_qp: Optional[PhysicalQP] = None
    assigned_dcqp: Optional[PhysicalQP] = None
    rebuilding: bool = False


def build_confirm_wrs(req: LoggedRequest) -> list[WorkRequest]:
    """Finish-mark the slot record, then replace the installed UID with the
    actual value. The record write precedes the CAS on the wire, so a lost
    replace-CAS still leaves a finished record for recovery to trust."""
    if req.wr.opcode is OpKind.FAA:
        actual = (req.faa_compare + req.wr.add_value) & ((1 << 64) - 1)
    else:
        actual = req.wr.swap_value
    return [
        WorkRequest(opcode=OpKind.WRITE, remote_addr=req.slot_addr + 8,
                    payload_bytes=8, values=(req.entry_value(0) | FINISHED_BIT,),
                    signaled=False, inline=True, origin="confirm",
                    app_uid=req.wr.op_uid),
        WorkRequest(opcode=OpKind.CAS, remote_addr=req.wr.remote_addr,
                    payload_bytes=8, compare_value=req.uid, swap_value=actual,
                    signaled=False, origin="confirm", app_uid=req.wr.op_uid),
    ]


@dataclass
class RecoveryReport:
    vqp_id: int
    failure_link: str
    started_at: int
    finished_at: int = 0
    retransmitted: list[int] = field(default_factory=list)     # app op uids
    value_recovered: list[int] = field(default_factory=list)   # app op uids
    post_failure_writes: int = 0
    classification: dict[int, str] = field(default_factory=dict)  # op_uid -> pre|post
    second_failure_during_recovery: bool = False


class VirtualQP:
    """Logical connection: one primary RCQP plus shared backup DCQPs.

    Owns the request-log ring, the side table of copied work requests, the
    remote completion-log / CAS-buffer region addresses, and policy flags
    controlling local logging, remote logging, and the CAS extension.
    """

    def __init__(self, vqp_id: int, primary_link: str, backup_order: list[str],
                 capacity: int = DEFAULT_LOG_CAPACITY, *,
                 log_locally: bool = True, log_remotely: bool = True,
                 extension_enabled: bool = True, on_log_full: str = "error"):
        self.vqp_id = vqp_id
        self.primary_link = primary_link
        self.backup_order = backup_order
        self.capacity = capacity
        self.log_locally = log_locally
        self.log_remotely = log_remotely
        self.extension_enabled = extension_enabled
        self.on_log_full = on_log_full

        self.conn = ConnTableEntry()
        self.state = VqpState.ACTIVE
        self.recovering = False
        self.recovery_epoch = 0

        self.ring: list[int] = [0] * capacity
        self.log_start = 0
        self.log_end = 0
        self.side: dict[int, LoggedRequest] = {}
        self._next_handle = 1
        self._next_timestamp = 1
        self._next_slot = 0
        self.live_slots = 0
        self._post_seq = 0

        self.remote_log_region: Optional[MemoryRegion] = None
        self.remote_cas_region: Optional[MemoryRegion] = None

        self.pending_unlogged: list["UnloggedOp"] = []
        self.last_cqe_seq = 0   # app-visible completion frontier (post_seq)
        self.completions: deque[AppCompletion] = deque()
        self.on_app_completion: Optional[Callable[[AppCompletion], None]] = None
        self.on_error: Optional[Callable[[AppCompletion], None]] = None
        self.blocked_posts: deque[list[WorkRequest]] = deque()

    # --- identity allocation ---

    def alloc_handle(self) -> int:
        handle = self._next_handle
        self._next_handle = (self._next_handle + 1) & HANDLE_MASK or 1
        return handle

    def alloc_timestamp(self) -> int:
        ts = self._next_timestamp
        self._next_timestamp = (self._next_timestamp + 1) & TS_MASK or 1
        return ts

    def next_post_seq(self) -> int:
        self._post_seq += 1
        return self._post_seq

    # --- request log ring ---

    def live_window(self) -> int:
        return self.log_end - self.log_start

    def append_entry(self, req: LoggedRequest) -> None:
        if self.live_window() >= self.capacity:
            raise LogFull(f"vqp {self.vqp_id} request log full ({self.capacity})")
        req.ring_index = self.log_end
        self.ring[self.log_end % self.capacity] = req.entry_value(0)
        self.side[req.handle] = req
        self.log_end += 1

    def live_entries(self) -> list[LoggedRequest]:
        out = []
        for idx in range(self.log_start, self.log_end):
            value = self.ring[idx % self.capacity]
            if value == 0:
                continue
            handle, _, _ = decode_log_entry(value)
            req = self.side.get(handle)
            if req is not None and not req.finished:
                out.append(req)
        return out

    def finish_entry(self, req: LoggedRequest) -> None:
        req.finished = True
        idx = req.ring_index % self.capacity
        handle, ts, _ = decode_log_entry(self.ring[idx])
        if handle == req.handle:
            self.ring[idx] = encode_log_entry(handle, ts, 1)
        self._reclaim()

    def _reclaim(self) -> None:
        while self.log_start < self.log_end:
            value = self.ring[self.log_start % self.capacity]
            handle, _, _ = decode_log_entry(value)
            req = self.side.get(handle)
            if value != 0 and req is not None and not req.finished:
                break
            if req is not None and req.finished:
                del self.side[handle]  # free the copied work request
                if req.extended:
                    self.live_slots -= 1
            self.ring[self.log_start % self.capacity] = 0
            self.log_start += 1

    def drop_window(self) -> None:
        """Remove all live entries (recovery has taken ownership of them)."""
        for idx in range(self.log_start, self.log_end):
            value = self.ring[idx % self.capacity]
            if value:
                handle, _, _ = decode_log_entry(value)
                req = self.side.pop(handle, None)
                if req is not None and req.extended:
                    self.live_slots -= 1
            self.ring[idx % self.capacity] = 0
        self.log_start = self.log_end

    def alloc_slot(self) -> int:
        if self.live_slots >= self.capacity:
            raise CasBufferFull(f"vqp {self.vqp_id} CAS buffer full")
        slot_index = self._next_slot % self.capacity
        self._next_slot += 1
        self.live_slots += 1
        return self.remote_cas_region.base_addr + slot_index * CAS_SLOT_BYTES

    # --- completion plumbing ---

    def deliver(self, completion: AppCompletion) -> None:
        self.completions.append(completion)
        if completion.status != "ok" and self.on_error is not None:
            self.on_error(completion)
        if self.on_app_completion is not None:
            self.on_app_completion(completion)

    def poll(self, wr_id: Optional[int] = None, max_n: Optional[int] = None) -> list[AppCompletion]:
        """Drain application completions, optionally filtered by request id."""
        out: list[AppCompletion] = []
        kept: deque[AppCompletion] = deque()
        while self.completions:
            c = self.completions.popleft()
            if wr_id is not None and c.wr_id != wr_id:
                kept.append(c)
                continue
            out.append(c)
            if max_n is not None and len(out) >= max_n:
                break
        while self.completions:
            kept.append(self.completions.popleft())
        self.completions = kept
        return out


@dataclass
class PoolPolicy:
    kind: str       # "fixed" | "ratio"
    value: int      # fixed size n, or k for a 1:k DCQP:RCQP ratio

    def target_size(self, rcqp_count: int) -> int:
        if self.kind == "fixed":
            return self.value
        return max(1, -(-rcqp_count // self.value))  # ceil, floor of 1


class DcqpPool:
    """Pre-allocated shared DCQPs on one link/NIC."""

    def __init__(self, link_id: str, requester: Requester, policy: PoolPolicy,
                 endpoints: list[str]):
        self.link_id = link_id
        self.requester = requester
        self.policy = policy
        self.endpoints = endpoints
        self.qps: list[PhysicalQP] = []

    def manage(self, rcqp_count: int) -> list[PhysicalQP]:
        """Grow the pool to the policy's target for the given RCQP count."""
        target = self.policy.target_size(rcqp_count)
        while len(self.qps) < target:
            qp = self.requester.create_dc_qp(self.link_id)
            for endpoint in self.endpoints:  # eager AH warm-up at pool creation
                self.requester.ah_cache.resolve(self.link_id, endpoint,
                                                self.requester.clock.now)
            self.qps.append(qp)
        return self.qps

    def usable(self) -> list[PhysicalQP]:
        return [qp for qp in self.qps if qp.state is QpState.READY]

    def pick(self, rng: random.Random) -> PhysicalQP:
        candidates = self.usable()
        if not candidates:
            raise NoBackupLink(f"no usable DCQP on link {self.link_id}")
        return candidates[rng.randrange(len(candidates))]


class ConfirmWorker:
    """Responder-side background worker resolving installed UIDs.

    Learns (slot, target) pairs from the commit hook whenever a CAS installs
    a value inside the live CAS-buffer address range, then periodically
    replaces the UID with the actual swap value via a local CAS and marks
    the slot record finished. Local memory mutations are committed to the
    trace so serial replay stays exact.
    """

    def __init__(self, responder: Responder, clock: SimClock, period: int = 100_000):
        self.responder = responder
        self.clock = clock
        self.period = period
        self.unresolved: dict[int, tuple[int, int]] = {}  # uid -> (slot_addr, target)
        self.resolved_total = 0
        self._scheduled = False
        self.cas_ranges: list[tuple[int, int]] = []
        responder.commit_hooks.append(self._on_commit)

    def watch_region(self, region: MemoryRegion) -> None:
        self.cas_ranges.append((region.base_addr, region.base_addr + region.length))

    def is_uid_value(self, value: int) -> bool:
        slot_addr = value >> 16
        return any(lo <= slot_addr < hi for lo, hi in self.cas_ranges)

    def _on_commit(self, record, wr: WorkRequest) -> None:
        if record.opcode is not OpKind.CAS:
            return
        compare, swap = record.operands
        if record.return_value == compare and self.is_uid_value(swap):
            self.unresolved[swap] = (swap >> 16, record.addr)
            if not self._scheduled:
                self._scheduled = True
                self.clock.schedule_call(self.clock.now + self.period,
                                         "confirm_worker", self._tick)

    def _tick(self) -> None:
        self._scheduled = False
        self.step()
        if self.unresolved:
            self._scheduled = True
            self.clock.schedule_call(self.clock.now + self.period,
                                     "confirm_worker", self._tick)

    def step(self) -> int:
        """One scan; returns how many slots were resolved this pass."""
        mem = self.responder.memory
        resolved = 0
        for uid in list(self.unresolved):
            slot_addr, target = self.unresolved[uid]
            record = mem.read(slot_addr + 8)
            if mem.read(target) == uid:
                actual = mem.read(slot_addr)
                self._local_commit(OpKind.CAS, target, (uid, actual))
                self._local_commit(OpKind.WRITE, slot_addr + 8, (record | FINISHED_BIT,))
                resolved += 1
                del self.unresolved[uid]
            elif record & FINISHED_BIT:
                del self.unresolved[uid]  # requester confirm won the race
        self.resolved_total += resolved
        return resolved

    def _local_commit(self, opcode: OpKind, addr: int, operands: tuple) -> None:
        from .simnet import CommitRecord

        value = self.responder.memory.apply(opcode, addr, operands)
        self.responder._commit_seq += 1
        self.responder.trace.append(CommitRecord(
            seq=self.responder._commit_seq, op_uid=None, origin="confirm_worker",
            opcode=opcode, addr=addr, commit_time=self.clock.now,
            return_value=value, qp_id=0, attempt=0, payload_bytes=8,
            operands=operands,
        ))


def confirm_worker_step(responder_worker: ConfirmWorker) -> int:
    return responder_worker.step()


NON_IDEMPOTENT = (OpKind.WRITE, OpKind.CAS, OpKind.FAA, OpKind.SEND)


@dataclass
class FailureRecord:
    link_id: str
    detect_time: int
    affected_vqps: list[int]


@dataclass
class RuntimeMetrics:
    bytes_retransmitted: int = 0
    retransmissions: list[tuple[int, int, int]] = field(default_factory=list)  # (op_uid, bytes, attempt)
    failures: list[FailureRecord] = field(default_factory=list)
    reports: list[RecoveryReport] = field(default_factory=list)
    log_packets: int = 0       # inline completion-log writes put on the wire
    log_bytes: int = 0
    app_cqe_count: int = 0


@dataclass
class _RecoveryCtx:
    epoch: int
    entries: list[LoggedRequest]
    unlogged: list[UnloggedOp]
    log_read: Optional[WorkRequest]
    target_reads: dict[int, WorkRequest]  # handle -> read of CAS target
    slot_reads: dict[int, WorkRequest]    # handle -> read of CAS-buffer slot
    report: RecoveryReport


class FailoverRuntime:
    """Shared engine all recovery policies run inside.

    Owns the vQP table, DCQP pools, the post path (logging + extension per
    policy flags), completion routing, and the recovery state machines.
    The policy object decides what happens on link failure/recovery.
    """

    def __init__(self, clock: SimClock, fabric: Fabric, requester: Requester,
                 responder: Responder, policy, rng: random.Random, *,
                 log_capacity: int = DEFAULT_LOG_CAPACITY,
                 pool_policy: PoolPolicy = None,
                 extension_enabled: bool = True,
                 on_log_full: str = "error",
                 confirm_period: int = 100_000,
                 migrate_back: bool = True):
        self.clock = clock
        self.fabric = fabric
        self.requester = requester
        self.responder = responder
        self.policy = policy
        self.rng = rng
        self.log_capacity = log_capacity
        self.pool_policy = pool_policy or PoolPolicy("fixed", 1)
        self.extension_enabled = extension_enabled
        self.on_log_full = on_log_full
        self.migrate_back = migrate_back

        self.vqps: dict[int, VirtualQP] = {}
        self.pools: dict[str, DcqpPool] = {}
        self.metrics = RuntimeMetrics()
        self.confirm_worker = ConfirmWorker(responder, clock, confirm_period)
        self._next_vqp_id = 1
        self._next_op_uid = 1
        self._app_region: Optional[MemoryRegion] = None
        self._faa_queue: list[tuple[VirtualQP, LoggedRequest]] = []

        policy.bind(self)
        if policy.uses_dcqp_pools:
            for link_id in fabric.links:
                pool = DcqpPool(link_id, requester, self.pool_policy, ["server"])
                pool.manage(0)
                self.pools[link_id] = pool
        requester.link_down_handlers.append(self._on_link_down_detected)
        requester.link_up_handlers.append(self._on_link_up_detected)

    # --- setup ---

    def alloc_op_uid(self) -> int:
        uid = self._next_op_uid
        self._next_op_uid += 1
        return uid

    def register_app_region(self, length: int) -> MemoryRegion:
        region = self.responder.regions.allocate(length)
        self.responder.regions.register(region, list(self.fabric.links))
        self._app_region = region
        return region

    def create_vqp(self, primary_link: str, backup_order: list[str]) -> VirtualQP:
        flags = self.policy.vqp_flags()
        vqp = VirtualQP(self._next_vqp_id, primary_link, backup_order,
                        self.log_capacity,
                        log_locally=flags["log_locally"],
                        log_remotely=flags["log_remotely"],
                        extension_enabled=(self.extension_enabled and flags["extend"]),
                        on_log_full=self.on_log_full)
        self._next_vqp_id += 1
        self.vqps[vqp.vqp_id] = vqp
        all_nics = list(self.fabric.links)
        if vqp.log_remotely:
            log_region = self.responder.regions.allocate(self.log_capacity * 8)
            self.responder.regions.register(log_region, all_nics)
            vqp.remote_log_region = log_region
            cas_region = self.responder.regions.allocate(self.log_capacity * CAS_SLOT_BYTES)
            self.responder.regions.register(cas_region, all_nics)
            vqp.remote_cas_region = cas_region
            self.confirm_worker.watch_region(cas_region)
        qp = self.requester.create_rc_ready(primary_link)
        vqp.conn.primary_rcqp = qp
        vqp.conn.current_qp = qp
        self.policy.on_vqp_created(vqp)
        if self.policy.uses_dcqp_pools:
            for pool in self.pools.values():
                pool.manage(len(self.vqps))  # DCQP auto-scaling follows vQP count
        return vqp

    def setup_recv_buffers(self, vqp: VirtualQP, count: int = 64) -> MemoryRegion:
        region = self.responder.regions.allocate(count * 8)
        self.responder.regions.register(region, list(self.fabric.links))
        for i in range(count):
            self.responder.post_recv(vqp.vqp_id, region.base_addr + 8 * i)
        return region

    # --- the post path (Alg-1 shape) ---

    def wr_logging(self, vqp: VirtualQP, wr_list: list[WorkRequest]) -> list[WorkRequest]:
        """Copy metadata and append a trailing inline completion-log write for
        every non-idempotent WR; idempotent ones pass through untouched."""
        out: list[WorkRequest] = []
        for wr in wr_list:
            nonidem = wr.opcode in NON_IDEMPOTENT and not wr.idempotent_hint
            if not vqp.log_locally or not nonidem:
                if wr.origin == "app":
                    vqp.pending_unlogged.append(UnloggedOp(vqp.next_post_seq(), wr))
                out.append(wr)
                continue
            handle = vqp.alloc_handle()
            ts = vqp.alloc_timestamp()
            req = LoggedRequest(handle=handle, timestamp=ts, ring_index=0,
                                post_seq=vqp.next_post_seq(), wr=wr,
                                orig_signaled=wr.signaled)
            vqp.append_entry(req)
            wr.entry_handle = handle
            out.append(wr)
            if vqp.log_remotely:
                slot = req.ring_index % vqp.capacity
                log_wr = WorkRequest(
                    opcode=OpKind.WRITE, wr_id=wr.wr_id,
                    remote_addr=vqp.remote_log_region.base_addr + 8 * slot,
                    payload_bytes=8, values=(req.entry_value(1),),
                    signaled=wr.signaled, inline=True,
                    origin="log", app_uid=wr.op_uid, entry_handle=handle,
                )
                wr.signaled = False  # completion-signaling moves to the log write
                out.append(log_wr)
        return out

    def wr_extension(self, vqp: VirtualQP, wr_list: list[WorkRequest],
                     qp: PhysicalQP) -> list[WorkRequest]:
        """Rewrite each CAS into the Occupy pair [slot write, UID-CAS] and each
        FAA into its read+CAS loop; skipped when the vqp disabled extension."""
        if not vqp.extension_enabled or not vqp.log_remotely:
            return wr_list
        out: list[WorkRequest] = []
        i = 0
        while i < len(wr_list):
            wr = wr_list[i]
            is_logged_app = (wr.origin == "app" and not wr.is_uid_cas
                             and wr.entry_handle is not None
                             and not wr.idempotent_hint)
            if is_logged_app and wr.opcode is OpKind.CAS:
                req = vqp.side[wr.entry_handle]
                out.extend(self._occupy_pair(vqp, req, qp, wr.compare_value,
                                             wr.swap_value, wr.wr_id))
                i += 2 if self._next_is_log(wr_list, i) else 1  # absorb the log write
                continue
            if is_logged_app and wr.opcode is OpKind.FAA:
                req = vqp.side[wr.entry_handle]
                req.extended = True
                self._faa_queue.append((vqp, req))  # started after this batch posts
                i += 2 if self._next_is_log(wr_list, i) else 1
                continue
            out.append(wr)
            i += 1
        return out

    @staticmethod
    def _next_is_log(wr_list: list[WorkRequest], i: int) -> bool:
        return i + 1 < len(wr_list) and wr_list[i + 1].origin == "log"

    def _occupy_pair(self, vqp: VirtualQP, req: LoggedRequest, qp: PhysicalQP,
                     compare: int, swap: int, wr_id: int) -> list[WorkRequest]:
        slot_addr = vqp.alloc_slot()
        uid = encode_uid(slot_addr, qp.qp_id)
        req.extended = True
        req.slot_addr = slot_addr
        req.uid = uid
        slot_write = WorkRequest(
            opcode=OpKind.WRITE, wr_id=wr_id, remote_addr=slot_addr,
            payload_bytes=CAS_SLOT_BYTES, values=(swap, req.entry_value(0)),
            signaled=False, inline=True, origin="slot", app_uid=req.wr.op_uid,
            fused_into_next=True,
        )
        uid_cas = WorkRequest(
            opcode=OpKind.CAS, wr_id=wr_id, remote_addr=req.wr.remote_addr,
            payload_bytes=8, compare_value=compare, swap_value=uid,
            signaled=req.orig_signaled, origin="app", op_uid=req.wr.op_uid,
            attempt=req.wr.attempt, entry_handle=req.handle, is_uid_cas=True,
        )
        return [slot_write, uid_cas]

    def _log_slots_needed(self, vqp: VirtualQP, wrs: list[WorkRequest]) -> int:
        if not vqp.log_locally:
            return 0
        return sum(1 for wr in wrs
                   if wr.opcode in NON_IDEMPOTENT and not wr.idempotent_hint)

    def post_send(self, vqp: VirtualQP, wr_list) -> None:
        """Resolve the current physical QP, log + extend, and post; a post
        error triggers switch + recovery."""
        if vqp.state is VqpState.DEAD:
            raise PostError(f"vqp {vqp.vqp_id} is dead")
        wrs = wr_chain_to_list(wr_list)
        for wr in wrs:
            if wr.origin == "app" and wr.op_uid is None:
                wr.op_uid = self.alloc_op_uid()
        needed = self._log_slots_needed(vqp, wrs)
        if needed > vqp.capacity:
            raise LogFull(f"batch needs {needed} entries, capacity {vqp.capacity}")
        if needed + vqp.live_window() > vqp.capacity:
            if vqp.on_log_full == "block":
                vqp.blocked_posts.append(wrs)
                return
            raise LogFull(f"vqp {vqp.vqp_id} request log full ({vqp.capacity})")
        logged = self.wr_logging(vqp, wrs)
        qp = self._resolve_qp(vqp)
        final = self.wr_extension(vqp, logged, qp)
        if not final:
            self._drain_faa_queue()
            return
        self._count_log_traffic(final)
        delay = 0
        if qp.kind is QpKind.DYNAMICALLY_CONNECTED:
            delay = self.requester.ah_cache.resolve(qp.link_id, qp.endpoint, self.clock.now)
        if delay:
            def deferred() -> None:
                self._raw_post(vqp, qp, final)
                self._drain_faa_queue()
            self.clock.schedule_call(self.clock.now + delay, "ah_deferred_post", deferred)
        else:
            self._raw_post(vqp, qp, final)
            self._drain_faa_queue()

    def _drain_faa_queue(self) -> None:
        while self._faa_queue:
            vqp, req = self._faa_queue.pop(0)
            if vqp.side.get(req.handle) is req and not req.finished:
                self._faa_start(vqp, req)

    def _resolve_qp(self, vqp: VirtualQP) -> PhysicalQP:
        qp = vqp.conn.current_qp
        if qp.state is QpState.CONNECTING:
            # temporary DCQP fallback while the RCQP (re)connects
            if vqp.conn.assigned_dcqp is not None and \
                    vqp.conn.assigned_dcqp.state is QpState.READY:
                return vqp.conn.assigned_dcqp
            pool = self.pools.get(qp.link_id)
            if pool is not None and pool.usable():
                vqp.conn.assigned_dcqp = pool.pick(self.rng)
                return vqp.conn.assigned_dcqp
        return qp

    def _count_log_traffic(self, wrs: list[WorkRequest]) -> None:
        for wr in wrs:
            if wr.origin == "log":
                self.metrics.log_packets += 1
                self.metrics.log_bytes += wr.payload_bytes

    def _raw_post(self, vqp: VirtualQP, qp: PhysicalQP, wrs: list[WorkRequest]) -> None:
        try:
            ops = self.requester.raw_post_send(qp, wrs)
        except PostError:
            self.handle_vqp_failure(vqp)
            return
        for op in ops:
            op.owner = vqp  # type: ignore[attr-defined]
            if op.on_acked is None:
                op.on_acked = self._op_acked

    # --- completion routing ---

    def _op_acked(self, op: PostedOp) -> None:
        vqp: VirtualQP = getattr(op, "owner", None)
        if vqp is None:
            return
        for wr in op.wrs:
            if wr.origin == "log":
                req = vqp.side.get(wr.entry_handle)
                if req is not None:
                    self._entry_acked(vqp, req, wr.signaled)
            elif wr.origin != "app":
                continue
            elif wr.is_uid_cas:
                self._uid_cas_acked(vqp, wr)
            elif wr.entry_handle is not None:
                # with remote logging the trailing log write carries the
                # completion; without one the op's own ACK does
                if not vqp.log_remotely:
                    req = vqp.side.get(wr.entry_handle)
                    if req is not None:
                        self._entry_acked(vqp, req, req.orig_signaled)
            else:
                self._unlogged_acked(vqp, wr)

    def _entry_acked(self, vqp: VirtualQP, req: LoggedRequest, signaled: bool) -> None:
        """Completion events exist per signaled op only; an unsignaled op's
        entry is reclaimed once a later completion implies it (remove-by-id
        plus in-order delivery). Until then it stays live, so the request-log
        window matches what the application can actually know."""
        if req.finished:
            return
        req.acked = True
        if signaled:
            vqp.last_cqe_seq = max(vqp.last_cqe_seq, req.post_seq)
            self._complete_logged(vqp, req)
            self._sweep_acked(vqp)
        elif req.post_seq < vqp.last_cqe_seq:
            self._complete_logged(vqp, req)

    def _sweep_acked(self, vqp: VirtualQP) -> None:
        for req in vqp.live_entries():
            if req.acked and not req.finished and req.post_seq < vqp.last_cqe_seq:
                self._complete_logged(vqp, req)
        remaining = []
        for u in vqp.pending_unlogged:
            if u.acked and u.post_seq < vqp.last_cqe_seq:
                self._deliver(vqp, u.wr, "ok", u.wr.result, recovered=False,
                              signaled=u.wr.signaled, unified=None)
            else:
                remaining.append(u)
        vqp.pending_unlogged = remaining

    def _unlogged_acked(self, vqp: VirtualQP, wr: WorkRequest) -> None:
        entry = next((u for u in vqp.pending_unlogged if u.wr is wr), None)
        if entry is None:
            return
        entry.acked = True
        if wr.signaled:
            vqp.last_cqe_seq = max(vqp.last_cqe_seq, entry.post_seq)
            vqp.pending_unlogged.remove(entry)
            self._deliver(vqp, wr, "ok", wr.result, recovered=False,
                          signaled=True, unified=None)
            self._sweep_acked(vqp)
        elif entry.post_seq < vqp.last_cqe_seq:
            vqp.pending_unlogged.remove(entry)
            self._deliver(vqp, wr, "ok", wr.result, recovered=False,
                          signaled=False, unified=None)

    def _complete_logged(self, vqp: VirtualQP, req: LoggedRequest) -> None:
        vqp.finish_entry(req)
        self._flush_blocked(vqp)
        value = req.wr.result
        self._deliver(vqp, req.wr, "ok", value, recovered=False,
                      signaled=req.orig_signaled, unified=req.unified_id())

    def _uid_cas_acked(self, vqp: VirtualQP, uid_cas: WorkRequest) -> None:
        req = vqp.side.get(uid_cas.entry_handle)
        if req is None or req.finished:
            return
        prior = uid_cas.result
        req.wr.result = prior
        if req.wr.opcode is OpKind.FAA:
            self._faa_cas_done(vqp, req, uid_cas, prior)
            return
        if prior == uid_cas.compare_value:
            self._post_confirm(vqp, req)  # protocol duty, not app visibility
        self._entry_acked(vqp, req, uid_cas.signaled)

    def _deliver(self, vqp: VirtualQP, wr: WorkRequest, status: str, value: object,
                 *, recovered: bool, signaled: bool,
                 unified: Optional[UnifiedRequestId],
                 cas_success: Optional[bool] = None) -> None:
        if signaled:
            self.metrics.app_cqe_count += 1
        if cas_success is None and wr.opcode is OpKind.CAS and status == "ok":
            cas_success = value == wr.compare_value
        vqp.deliver(AppCompletion(
            wr_id=wr.wr_id, unified_id=unified, op_uid=wr.op_uid, status=status,
            return_value=value, recovered=recovered, vqp_id=vqp.vqp_id,
            time=self.clock.now, signaled=signaled, cas_success=cas_success,
        ))

    def _flush_blocked(self, vqp: VirtualQP) -> None:
        while vqp.blocked_posts:
            head = vqp.blocked_posts[0]
            if self._log_slots_needed(vqp, head) + vqp.live_window() > vqp.capacity:
                break
            vqp.blocked_posts.popleft()
            self.post_send(vqp, head)

    # --- requester-side Confirm (step 2) ---

    def _post_confirm(self, vqp: VirtualQP, req: LoggedRequest) -> None:
        try:
            self._raw_post(vqp, self._resolve_qp(vqp), build_confirm_wrs(req))
        except PostError:
            pass  # the responder's confirm worker resolves it instead

    # --- FAA rewrite: read + extended CAS, retried on contention ---

    def _faa_start(self, vqp: VirtualQP, req: LoggedRequest) -> None:
        if vqp.side.get(req.handle) is not req or req.finished:
            return  # entry was reclaimed by recovery; a retransmission owns it now
        if req.faa_attempts >= FAA_RETRY_LIMIT:
            vqp.finish_entry(req)
            self._deliver(vqp, req.wr, "error:faa_retry_exhausted", None,
                          recovered=False, signaled=req.orig_signaled,
                          unified=req.unified_id())
            return
        req.faa_attempts += 1
        req.slot_addr = None
        req.uid = None
        read = WorkRequest(opcode=OpKind.READ, remote_addr=req.wr.remote_addr,
                           payload_bytes=8, signaled=False, origin="protocol",
                           app_uid=req.wr.op_uid)
        req.faa_read_wr = read
        qp = self._resolve_qp(vqp)

        def on_read(op: PostedOp) -> None:
            value = read.result[0]
            self._faa_post_cas(vqp, req, value)

        try:
            ops = self.requester.raw_post_send(qp, [read])
        except PostError:
            self.handle_vqp_failure(vqp)
            return
        ops[0].owner = vqp  # type: ignore[attr-defined]
        ops[0].on_acked = on_read

    def _faa_post_cas(self, vqp: VirtualQP, req: LoggedRequest, current: int) -> None:
        if req.finished or vqp.state is VqpState.DEAD:
            return
        if self.confirm_worker.is_uid_value(current):
            # the target is mid-occupation by another extended CAS; a raw CAS
            # against the interim UID would hijack its confirm, so wait for
            # the resolution (requester confirm or the responder worker)
            self.clock.schedule_call(self.clock.now + FAA_UID_BACKOFF,
                                     "faa_uid_wait",
                                     lambda: self._faa_start(vqp, req))
            return
        qp = self._resolve_qp(vqp)
        compare = current
        swap = (current + req.wr.add_value) & ((1 << 64) - 1)
        req.faa_compare = compare
        pair = self._occupy_pair(vqp, req, qp, compare, swap, req.wr.wr_id)
        pair[1].op_uid = req.wr.op_uid
        pair[1].signaled = False  # app completion delivered by the FAA machine
        try:
            ops = self.requester.raw_post_send(qp, pair)
        except PostError:
            self.handle_vqp_failure(vqp)
            return
        for op in ops:
            op.owner = vqp  # type: ignore[attr-defined]
        ops[-1].on_acked = lambda op: self._faa_cas_done(vqp, req, op.tail_wr,
                                                         op.tail_wr.result)

    def _faa_cas_done(self, vqp: VirtualQP, req: LoggedRequest,
                      uid_cas: WorkRequest, prior: int) -> None:
        if req.finished:
            return
        if prior == uid_cas.compare_value:
            req.wr.result = prior
            vqp.finish_entry(req)
            self._flush_blocked(vqp)
            self._post_confirm(vqp, req)
            self._deliver(vqp, req.wr, "ok", prior, recovered=False,
                          signaled=req.orig_signaled, unified=req.unified_id())
        else:
            self._faa_start(vqp, req)  # contention: retry read + CAS

    # --- failure handling ---

    def _on_link_down_detected(self, link_id: str, time: int) -> None:
        self.handle_link_failure(link_id)

    def _on_link_up_detected(self, link_id: str, time: int) -> None:
        self.policy.on_link_recovered(link_id)

    def handle_vqp_failure(self, vqp: VirtualQP) -> None:
        if vqp.state is VqpState.DEAD or vqp.recovering:
            return
        qp = vqp.conn.current_qp
        self.handle_link_failure(qp.link_id)

    def affected_vqps(self, link_id: str) -> list[VirtualQP]:
        out = []
        for vqp in self.vqps.values():
            if vqp.state is VqpState.DEAD:
                continue
            qp = vqp.conn.current_qp
            if qp is not None and qp.link_id == link_id:
                out.append(vqp)
        return out

    def handle_link_failure(self, link_id: str) -> None:
        affected = self.affected_vqps(link_id)
        if not affected:
            return
        self.metrics.failures.append(FailureRecord(
            link_id=link_id, detect_time=self.clock.now,
            affected_vqps=[v.vqp_id for v in affected]))
        self.policy.on_link_failure(link_id, affected)

    def select_backup_link(self, vqp: VirtualQP, failed: str) -> Optional[str]:
        candidates = list(vqp.backup_order) + [vqp.primary_link]
        for link_id in candidates:
            if link_id == failed:
                continue
            link = self.fabric.links.get(link_id)
            if link is not None and link.state is LinkState.UP:
                return link_id
        return None

    def kill_vqp(self, vqp: VirtualQP, reason: str) -> None:
        """No backup remains: surface errors for everything in flight."""
        vqp.state = VqpState.DEAD
        vqp.recovering = False
        items: list[tuple[int, WorkRequest, Optional[LoggedRequest]]] = []
        for req in vqp.live_entries():
            items.append((req.post_seq, req.wr, req))
        for u in vqp.pending_unlogged:
            items.append((u.post_seq, u.wr, None))
        items.sort(key=lambda t: t[0])
        vqp.drop_window()
        vqp.pending_unlogged = []
        for _, wr, req in items:
            self._deliver(vqp, wr, f"error:{reason}", None, recovered=False,
                          signaled=True, unified=req.unified_id() if req else None)


class PolicyBase:
    """Recovery-policy interface; every policy runs inside FailoverRuntime."""

    kind = "base"
    uses_dcqp_pools = False

    def __init__(self) -> None:
        self.runtime: Optional[FailoverRuntime] = None

    def bind(self, runtime: FailoverRuntime) -> None:
        self.runtime = runtime

    def vqp_flags(self) -> dict:
        raise NotImplementedError

    def on_vqp_created(self, vqp: VirtualQP) -> None:
        pass

    def on_link_failure(self, link_id: str, affected: list[VirtualQP]) -> None:
        raise NotImplementedError

    def on_link_recovered(self, link_id: str) -> None:
        pass


class VarunaPolicy(PolicyBase):
    """DCQP-pool switchover plus log-driven selective retransmission."""

    kind = "varuna"
    uses_dcqp_pools = True

    def vqp_flags(self) -> dict:
        return {"log_locally": True, "log_remotely": True, "extend": True}

    # --- switch (Alg-3 shape, batched per §3.4) ---

    def on_link_failure(self, link_id: str, affected: list[VirtualQP]) -> None:
        rt = self.runtime
        plans: list[tuple[VirtualQP, str, bool]] = []
        # one atomic batched remap of the logical->physical table
        for vqp in affected:
            interrupted = vqp.recovering
            backup = rt.select_backup_link(vqp, link_id)
            pool = rt.pools.get(backup) if backup is not None else None
            if backup is None or pool is None or not pool.usable():
                rt.kill_vqp(vqp, "no_backup_link")
                continue
            vqp.conn.assigned_dcqp = pool.pick(rt.rng)
            vqp.conn.current_qp = vqp.conn.assigned_dcqp
            vqp.conn.rebuilding = True
            vqp.recovering = True
            vqp.recovery_epoch += 1
            plans.append((vqp, backup, interrupted))
        for vqp, backup, _ in plans:
            self._launch_rebuild(vqp, backup)
        for vqp, backup, interrupted in plans:
            self.recovery(vqp, link_id, interrupted)

    def switch_vqp(self, vqp: VirtualQP) -> None:
        """Remap every vQP sharing this vqp's failed link (batched)."""
        self.runtime.handle_link_failure(vqp.conn.current_qp.link_id)

    def _launch_rebuild(self, vqp: VirtualQP, link_id: str) -> None:
        rt = self.runtime
        epoch = vqp.recovery_epoch

        def done(qp: PhysicalQP, ok: bool) -> None:
            if vqp.state is VqpState.DEAD or vqp.recovery_epoch != epoch:
                if ok:
                    rt.requester.destroy_qp(qp)
                return
            if ok:
                self._swap_in(vqp, qp)
            else:
                nxt = rt.select_backup_link(vqp, qp.link_id)
                if nxt is not None:
                    self._launch_rebuild(vqp, nxt)

        rt.requester.rc_connect(link_id, "server", done)

    def _swap_in(self, vqp: VirtualQP, qp: PhysicalQP) -> None:
        """Swap-back: new posts go to the rebuilt RCQP; in-flight requests on
        the DCQP keep completing on the DCQP's CQ."""
        rt = self.runtime
        old = vqp.conn.primary_rcqp
        if old is not None and old is not qp:
            rt.requester.destroy_qp(old)
        vqp.conn.primary_rcqp = qp
        vqp.conn.current_qp = qp
        vqp.conn.rebuilding = False
        vqp.conn.assigned_dcqp = None

    def on_link_recovered(self, link_id: str) -> None:
        if not self.runtime.migrate_back:
            return
        for vqp in self.runtime.vqps.values():
            if (vqp.state is VqpState.ACTIVE and not vqp.recovering
                    and not vqp.conn.rebuilding
                    and vqp.primary_link == link_id
                    and vqp.conn.current_qp.link_id != link_id):
                vqp.conn.rebuilding = True
                self._launch_rebuild(vqp, link_id)

    # --- recovery (Alg-4 shape) ---

    def recovery(self, vqp: VirtualQP, failure_link: str,
                 interrupted: bool = False) -> None:
        rt = self.runtime
        report = RecoveryReport(vqp_id=vqp.vqp_id, failure_link=failure_link,
                                started_at=rt.clock.now,
                                second_failure_during_recovery=interrupted)
        entries = vqp.live_entries()
        unlogged = list(vqp.pending_unlogged)
        if not entries and not unlogged:
            vqp.recovering = False
            report.finished_at = rt.clock.now
            rt.metrics.reports.append(report)
            return
        ctx = _RecoveryCtx(epoch=vqp.recovery_epoch, entries=entries,
                           unlogged=unlogged, log_read=None, target_reads={},
                           slot_reads={}, report=report)
        reads: list[WorkRequest] = []
        if entries:
            # the whole completion log comes back in one read
            ctx.log_read = WorkRequest(
                opcode=OpKind.READ, remote_addr=vqp.remote_log_region.base_addr,
                payload_bytes=vqp.capacity * 8, signaled=False, origin="protocol")
            reads.append(ctx.log_read)
        for req in entries:
            needs_target = (req.extended and req.slot_addr is not None) or \
                (req.wr.opcode is OpKind.CAS and not req.extended)
            if needs_target:
                tr = WorkRequest(opcode=OpKind.READ, remote_addr=req.wr.remote_addr,
                                 payload_bytes=8, signaled=False, origin="protocol")
                ctx.target_reads[req.handle] = tr
                reads.append(tr)
            if req.extended and req.slot_addr is not None:
                sr = WorkRequest(opcode=OpKind.READ, remote_addr=req.slot_addr,
                                 payload_bytes=CAS_SLOT_BYTES, signaled=False,
                                 origin="protocol")
                ctx.slot_reads[req.handle] = sr
                reads.append(sr)
        if not reads:
            self._process_recovery(vqp, ctx)
            return
        qp = rt._resolve_qp(vqp)
        try:
            ops = rt.requester.raw_post_send(qp, reads)
        except PostError:
            report.second_failure_during_recovery = True
            rt.metrics.reports.append(report)
            return  # the next failure notification re-enters recovery
        for op in ops:
            op.owner = vqp  # type: ignore[attr-defined]
        ops[-1].on_acked = lambda _op: self._process_recovery(vqp, ctx)

    def _process_recovery(self, vqp: VirtualQP, ctx: _RecoveryCtx) -> None:
        rt = self.runtime
        if vqp.recovery_epoch != ctx.epoch or vqp.state is VqpState.DEAD:
            return
        report = ctx.report
        log_data: tuple = ctx.log_read.result if ctx.log_read is not None else ()
        retransmit: list[tuple[int, WorkRequest]] = []
        confirms: list[WorkRequest] = []
        deliveries: list[tuple[LoggedRequest, str, object, Optional[bool]]] = []
        for req in ctx.entries:
            wr = req.wr
            if req.extended:
                verdict, original, observed = self.cas_recovery(vqp, req, ctx)
                if verdict is RecoveryVerdict.SUCCESS:
                    report.classification[wr.op_uid] = "post"
                    report.value_recovered.append(wr.op_uid)
                    wr.result = original
                    confirms.extend(build_confirm_wrs(req))
                    vqp.finish_entry(req)
                    success = True if wr.opcode is OpKind.CAS else None
                    deliveries.append((req, "ok", original, success))
                elif verdict is RecoveryVerdict.FAILED and wr.opcode is OpKind.CAS:
                    report.classification[wr.op_uid] = "post"
                    report.value_recovered.append(wr.op_uid)
                    wr.result = observed
                    vqp.finish_entry(req)
                    deliveries.append((req, "ok", observed, False))
                else:
                    # not executed (or a failed FAA attempt): safe to retransmit
                    report.classification[wr.op_uid] = "pre"
                    wr.signaled = req.orig_signaled
                    retransmit.append((req.post_seq, wr))
            else:
                slot = req.ring_index % vqp.capacity
                remote = log_data[slot] if slot < len(log_data) else 0
                if entries_match(remote, req.entry_value(0)):
                    report.classification[wr.op_uid] = "post"
                    self.post_failure_dispatch(vqp, req, ctx, report, deliveries)
                else:
                    report.classification[wr.op_uid] = "pre"
                    wr.signaled = req.orig_signaled
                    retransmit.append((req.post_seq, wr))
        for u in ctx.unlogged:
            retransmit.append((u.post_seq, u.wr))  # idempotent: safely re-issued
        vqp.drop_window()
        vqp.pending_unlogged = []

        # zero the remote completion log before any new entry can land on it;
        # confirms ride the same doorbell so they reach the wire before any
        # application reaction to the recovered completions below
        batch = [WorkRequest(
            opcode=OpKind.WRITE, remote_addr=vqp.remote_log_region.base_addr,
            payload_bytes=vqp.capacity * 8, values=(0,) * vqp.capacity,
            signaled=False, origin="protocol")]
        batch.extend(confirms)
        rt._raw_post(vqp, rt._resolve_qp(vqp), batch)
        for req, status, value, success in deliveries:
            rt._deliver(vqp, req.wr, status, value, recovered=True,
                        signaled=(req.orig_signaled if status == "ok" else True),
                        unified=req.unified_id(), cas_success=success)

        retransmit.sort(key=lambda t: t[0])
        resend: list[WorkRequest] = []
        for _, wr in retransmit:
            wr.attempt += 1
            wr.result = None
            wr.completed_at = None
            wr.rkey = None  # re-resolved for the new NIC's rkey table
            wr.entry_handle = None
            if wr.origin == "app":
                rt.metrics.bytes_retransmitted += wr.request_wire_bytes()
                rt.metrics.retransmissions.append(
                    (wr.op_uid, wr.request_wire_bytes(), wr.attempt))
                report.retransmitted.append(wr.op_uid)
            resend.append(wr)
        vqp.recovering = False
        report.finished_at = rt.clock.now
        rt.metrics.reports.append(report)
        if resend:
            rt.post_send(vqp, resend)

    def cas_recovery(self, vqp: VirtualQP, req: LoggedRequest,
                     ctx: _RecoveryCtx) -> tuple[RecoveryVerdict, Optional[int], Optional[int]]:
        """UID decision table: (verdict, recovered original value, observed value).

        UID at target, or a finished slot record, proves the CAS executed and
        succeeded; a matching-but-unfinished record proves it executed and
        returned false; an absent record proves it never executed.
        """
        if req.slot_addr is None:
            return RecoveryVerdict.NOT_EXECUTED, None, None  # FAA cut before its CAS phase
        target_val = ctx.target_reads[req.handle].result[0]
        slot_words = ctx.slot_reads[req.handle].result
        record = slot_words[1]
        present = entries_match(record, req.entry_value(0))
        compare = req.faa_compare if req.wr.opcode is OpKind.FAA else req.wr.compare_value
        if target_val == req.uid:
            if not present:
                raise AmbiguousState(
                    f"uid installed without slot record (vqp {vqp.vqp_id})")
            return RecoveryVerdict.SUCCESS, compare, target_val
        if present and (record & FINISHED_BIT):
            return RecoveryVerdict.SUCCESS, compare, target_val
        if present:
            return RecoveryVerdict.FAILED, None, target_val
        return RecoveryVerdict.NOT_EXECUTED, None, None

    def post_failure_dispatch(self, vqp: VirtualQP, req: LoggedRequest,
                              ctx: _RecoveryCtx, report: RecoveryReport,
                              deliveries: list) -> str:
        """Per-opcode handling for an entry whose completion-log slot matched."""
        wr = req.wr
        if wr.opcode is OpKind.WRITE:
            report.post_failure_writes += 1
            vqp.finish_entry(req)
            deliveries.append((req, "ok", None, None))
            return "no_action"
        if wr.opcode is OpKind.CAS:
            # extension disabled: re-read and compare against the swap value
            observed = ctx.target_reads[req.handle].result[0]
            succeeded = observed == wr.swap_value
            value = wr.compare_value if succeeded else observed
            report.value_recovered.append(wr.op_uid)
            wr.result = value
            vqp.finish_entry(req)
            deliveries.append((req, "ok", value, succeeded))
            return "reread"
        # two-sided Send, or a native FAA: the return value is gone for good
        vqp.finish_entry(req)
        deliveries.append((req, "error:unrecoverable_return_value", None, None))
        return "unrecoverable"

