"""Simulated verbs layer.

Physical QPs (reliable-connected and dynamically-connected), MTU
segmentation with consecutive PSNs, responder-side same-QP duplicate
suppression via cached ACKs, memory regions with per-NIC rkeys, address
handle caching, and connection-establishment costs.

A link-down transition kills in-flight packets immediately (fabric), but
requester-visible consequences (QP -> Error, flushed error completions,
policy notification) happen one detection latency later; posting into the
undetected window simply loses packets on the wire. Posting on an Error or
Connecting QP raises PostError - the fast in-band failure signal.
"""

from __future__ import annotations

import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .simnet import (
    CommitRecord,
    ExecutionTrace,
    Fabric,
    LinkState,
    OpKind,
    Packet,
    PacketKind,
    ResponderMemory,
    SimClock,
)

RC_QP_MEMORY_COST = 366 * 1024
DC_QP_MEMORY_COST = 366 * 1024
INLINE_THRESHOLD = 64


class PostError(Exception):
    """Posting on a QP that is not Ready; Alg-1's in-band failure signal."""


class QpKind(Enum):
    RELIABLE_CONNECTED = "rc"
    DYNAMICALLY_CONNECTED = "dc"


class QpState(Enum):
    RESET = "reset"
    CONNECTING = "connecting"
    READY = "ready"
    ERROR = "error"


@dataclass
class WorkRequest:
    """One RDMA operation; the unit the whole system moves.

    `values` holds the 8-byte words a Write/Send installs starting at
    remote_addr (applications use a single stamp word; payload_bytes keeps
    the full wire size for segmentation and byte accounting).
    """

    opcode: OpKind
    wr_id: int = 0
    remote_addr: int = 0
    rkey: Optional[int] = None          # None -> resolved per-NIC at post time
    payload_bytes: int = 8
    values: tuple[int, ...] = (0,)
    compare_value: int = 0
    swap_value: int = 0
    add_value: int = 0
    signaled: bool = True
    inline: bool = False
    idempotent_hint: bool = False
    next: Optional["WorkRequest"] = None

    # simulation bookkeeping
    op_uid: Optional[int] = None        # application op identity (oracle key)
    app_uid: Optional[int] = None       # app op a protocol WR acts for
    origin: str = "app"                 # app | log | slot | confirm | protocol
    attempt: int = 0
    fused_into_next: bool = False       # wire-fused with the following WR
    recv_channel: Optional[int] = None  # two-sided target queue (vqp id)
    entry_handle: Optional[int] = None  # request-log entry this WR belongs to
    is_uid_cas: bool = False            # the Occupy-stage CAS carrying a UID swap
    result: object = None               # delivered by the ACK even when unsignaled
    completed_at: Optional[int] = None

    def request_wire_bytes(self) -> int:
        if self.opcode in (OpKind.WRITE, OpKind.SEND):
            return self.payload_bytes
        if self.opcode in (OpKind.CAS, OpKind.FAA):
            return 8
        return 0  # READ: request carries no payload; data rides the ACK path

    def ack_wire_bytes(self) -> int:
        if self.opcode is OpKind.READ:
            return self.payload_bytes
        if self.opcode in (OpKind.CAS, OpKind.FAA):
            return 8
        return 0

    def operands(self) -> tuple:
        if self.opcode in (OpKind.WRITE, OpKind.SEND):
            return self.values
        if self.opcode is OpKind.CAS:
            return (self.compare_value, self.swap_value)
        if self.opcode is OpKind.FAA:
            return (self.add_value,)
        return (self.payload_bytes,)  # READ length


def wr_chain_to_list(head: "WorkRequest | list[WorkRequest]") -> list[WorkRequest]:
    """Materialize a next-linked WR chain (or pass a list through); rejects cycles."""
    if isinstance(head, list):
        return head
    out: list[WorkRequest] = []
    seen: set[int] = set()
    wr: Optional[WorkRequest] = head
    while wr is not None:
        if id(wr) in seen:
            raise ValueError("work request chain contains a cycle")
        seen.add(id(wr))
        out.append(wr)
        wr = wr.next
    return out


@dataclass
class Completion:
    wr_id: int
    status: str                 # ok | flush_error | remote_access_error | ...
    return_value: object
    qp_id: int
    op: "PostedOp" = None
    recovered: bool = False

    @property
    def is_error(self) -> bool:
        return self.status != "ok"


@dataclass
class PostedOp:
    """One wire operation: a WR, or a fused [slot write, CAS] pair."""

    op_id: int
    qp: "PhysicalQP"
    wrs: list[WorkRequest]
    first_psn: int
    last_psn: int
    n_segments: int
    post_time: int
    segment_sizes: list[int]
    segments_arrived: int = 0
    committed: bool = False
    flushed: bool = False
    on_acked: Optional[Callable[["PostedOp"], None]] = None

    @property
    def head_wr(self) -> WorkRequest:
        return self.wrs[0]

    @property
    def tail_wr(self) -> WorkRequest:
        return self.wrs[-1]

    def signaled_wr(self) -> Optional[WorkRequest]:
        for wr in self.wrs:
            if wr.signaled:
                return wr
        return None


class PhysicalQP:
    def __init__(self, qp_id: int, kind: QpKind, link_id: str, endpoint: str, memory_cost: int):
        assert qp_id < (1 << 16), "qp_id must fit 16 bits (UID encoding)"
        self.qp_id = qp_id
        self.kind = kind
        self.link_id = link_id
        self.endpoint = endpoint
        self.state = QpState.RESET
        self.next_psn = 0
        self.memory_cost = memory_cost
        self.pending: dict[int, PostedOp] = {}  # last_psn -> op
        self.cq: deque[Completion] = deque()
        self.on_cqe: Optional[Callable[[Completion], None]] = None

    def push_cqe(self, completion: Completion) -> None:
        self.cq.append(completion)
        if self.on_cqe is not None:
            self.on_cqe(completion)


@dataclass
class MemoryRegion:
    region_id: int
    base_addr: int
    length: int
    rkeys: dict[tuple[int, str], int] = field(default_factory=dict)

    def contains(self, addr: int) -> bool:
        return self.base_addr <= addr < self.base_addr + self.length


class RegionTable:
    """Responder memory regions plus the (region id, NIC id) -> rkey table."""

    def __init__(self) -> None:
        self.regions: list[MemoryRegion] = []
        self._next_region_id = 1
        self._next_base = 0x1000
        self._next_rkey = 0x100

    def allocate(self, length: int, base_addr: Optional[int] = None) -> MemoryRegion:
        if length <= 0:
            raise ValueError("region length must be > 0")
        if base_addr is None:
            base_addr = self._next_base
        self._next_base = max(self._next_base, base_addr + length)
        # keep regions 8-byte aligned
        self._next_base = (self._next_base + 7) & ~7
        region = MemoryRegion(self._next_region_id, base_addr, length)
        self._next_region_id += 1
        self.regions.append(region)
        return region

    def register(self, region: MemoryRegion, nic_ids: list[str]) -> MemoryRegion:
        for nic in nic_ids:
            key = (region.region_id, nic)
            if key not in region.rkeys:
                region.rkeys[key] = self._next_rkey
                self._next_rkey += 1
        return region

    def rkey_for(self, region: MemoryRegion, nic_id: str) -> int:
        return region.rkeys[(region.region_id, nic_id)]

    def find_by_addr(self, addr: int) -> Optional[MemoryRegion]:
        for region in self.regions:
            if region.contains(addr):
                return region
        return None

    def resolve_rkey(self, addr: int, nic_id: str) -> Optional[int]:
        region = self.find_by_addr(addr)
        if region is None:
            return None
        return region.rkeys.get((region.region_id, nic_id))


class AddressHandleCache:
    """Lazily created, cached per (NIC, remote endpoint). First use pays."""

    def __init__(self, ah_create_delay: int):
        self.ah_create_delay = ah_create_delay
        self.cache: dict[tuple[str, str], int] = {}

    def resolve(self, nic_id: str, endpoint: str, now: int) -> int:
        """Returns the extra delay the caller incurs (0 on a cache hit)."""
        key = (nic_id, endpoint)
        if key in self.cache:
            return 0
        self.cache[key] = now
        return self.ah_create_delay

    def __len__(self) -> int:
        return len(self.cache)


@dataclass
class _RxState:
    expected_psn: int = 0
    ack_cache: OrderedDict = field(default_factory=OrderedDict)  # psn -> ack template
    ooo: dict[int, Packet] = field(default_factory=dict)


class Responder:
    """Responder node: memory, regions, per-QP receive state, commit point."""

    def __init__(self, clock: SimClock, fabric: Fabric, psn_window_depth: int = 128):
        self.clock = clock
        self.fabric = fabric
        self.memory = ResponderMemory()
        self.trace = ExecutionTrace()
        self.regions = RegionTable()
        self.psn_window_depth = psn_window_depth
        self.rx: dict[int, _RxState] = {}
        self.recv_queues: dict[int, deque[int]] = {}  # channel -> recv buffer addrs
        self.commit_hooks: list[Callable[[CommitRecord, WorkRequest], None]] = []
        self.duplicates_suppressed = 0
        self.dropped_for_error_qp = 0
        self._commit_seq = 0

    def post_recv(self, channel: int, addr: int) -> None:
        self.recv_queues.setdefault(channel, deque()).append(addr)

    def rx_state(self, qp_id: int) -> _RxState:
        if qp_id not in self.rx:
            self.rx[qp_id] = _RxState()  # fresh QP: empty window
        return self.rx[qp_id]

    def on_packet(self, link_id: str, packet: Packet, time: int) -> None:
        if packet.kind is not PacketKind.REQUEST_SEGMENT:
            return
        op: PostedOp = packet.carried_op
        if op.qp.state is QpState.ERROR:
            self.dropped_for_error_qp += 1
            return
        state = self.rx_state(packet.dst_qp)
        if packet.psn < state.expected_psn or packet.psn in state.ack_cache:
            cached = state.ack_cache.get(packet.psn)
            if cached is not None:
                self.duplicates_suppressed += 1
                self._send_ack(link_id, packet.dst_qp, packet.psn, *cached)
            return
        if packet.psn > state.expected_psn:
            state.ooo[packet.psn] = packet
            return
        self._accept(link_id, packet, time)
        while state.expected_psn in state.ooo:
            nxt = state.ooo.pop(state.expected_psn)
            self._accept(link_id, nxt, self.clock.now)

    def _accept(self, link_id: str, packet: Packet, time: int) -> None:
        state = self.rx_state(packet.dst_qp)
        state.expected_psn = packet.psn + 1
        op: PostedOp = packet.carried_op
        op.segments_arrived += 1
        if packet.is_final_segment and op.segments_arrived >= op.n_segments:
            self._commit_op(link_id, op, time)

    def _commit_op(self, link_id: str, op: PostedOp, time: int) -> None:
        bad = self._access_check(op, link_id)
        if bad is not None:
            self._cache_and_ack(link_id, op, status=bad, value=None, bytes_=0)
            return
        value: object = None
        for wr in op.wrs:
            value = self._apply(wr, op, link_id, time)
        op.committed = True
        self._cache_and_ack(link_id, op, status="ok", value=value, bytes_=op.tail_wr.ack_wire_bytes())

    def _access_check(self, op: PostedOp, link_id: str) -> Optional[str]:
        for wr in op.wrs:
            if wr.opcode is OpKind.SEND:
                continue
            region = self.regions.find_by_addr(wr.remote_addr)
            if region is None:
                return "invalid_address"
            if wr.rkey != self.regions.rkey_for(region, link_id):
                return "remote_access_error"
        return None

    def _apply(self, wr: WorkRequest, op: PostedOp, link_id: str, time: int) -> object:
        addr = wr.remote_addr
        operands = wr.operands()
        if wr.opcode is OpKind.SEND:
            queue = self.recv_queues.get(wr.recv_channel or 0)
            if not queue:
                raise RuntimeError("receive queue empty (RNR modeling is out of scope)")
            addr = queue.popleft()
            operands = wr.values
        value = self.memory.apply(wr.opcode, addr, operands)
        self._commit_seq += 1
        record = CommitRecord(
            seq=self._commit_seq,
            op_uid=wr.op_uid if wr.origin == "app" else wr.app_uid,
            origin=wr.origin,
            opcode=wr.opcode,
            addr=addr,
            commit_time=time,
            return_value=value,
            qp_id=op.qp.qp_id,
            attempt=wr.attempt,
            payload_bytes=wr.payload_bytes,
            operands=operands,
        )
        self.trace.append(record)
        for hook in self.commit_hooks:
            hook(record, wr)
        return value

    def _cache_and_ack(self, link_id: str, op: PostedOp, status: str, value: object, bytes_: int) -> None:
        state = self.rx_state(op.qp.qp_id)
        state.ack_cache[op.last_psn] = (status, value, bytes_, op)
        while len(state.ack_cache) > self.psn_window_depth:
            state.ack_cache.popitem(last=False)
        self._send_ack(link_id, op.qp.qp_id, op.last_psn, status, value, bytes_, op)

    def _send_ack(self, link_id: str, qp_id: int, psn: int, status: str, value: object,
                  bytes_: int, op: PostedOp) -> None:
        ack = Packet(
            packet_id=self.fabric.new_packet_id(),
            src_qp=qp_id,
            dst_qp=qp_id,
            psn=psn,
            kind=PacketKind.ACK,
            payload_bytes=bytes_,
            carried_op=op,
            ack_return_value=(value if status == "ok" else None),
        )
        ack.status = status  # type: ignore[attr-defined]
        link = self.fabric.links[link_id]
        self.fabric.transmit(link, ack, "s2c", self.clock.now)


class Requester:
    """Requester node: QPs, posting/segmentation, ACK handling, handshakes."""

    def __init__(self, clock: SimClock, fabric: Fabric, responder: Responder,
                 handshake_delay: int, ah_create_delay: int, detection_latency: int):
        self.clock = clock
        self.fabric = fabric
        self.responder = responder
        self.handshake_delay = handshake_delay
        self.detection_latency = detection_latency
        self.ah_cache = AddressHandleCache(ah_create_delay)
        self.qps: dict[int, PhysicalQP] = {}
        self.qps_by_link: dict[str, list[PhysicalQP]] = {}
        self.qp_links: dict[int, str] = {}  # survives destroy_qp; metrics use it
        self._next_qp_id = 1
        self._next_op_id = 1
        self.link_down_handlers: list[Callable[[str, int], None]] = []  # fired at detection
        self.link_up_handlers: list[Callable[[str, int], None]] = []
        fabric.link_down_listeners.append(self._on_physical_down)
        fabric.link_up_listeners.append(self._on_physical_up)

    # --- QP lifecycle ---

    def _new_qp(self, kind: QpKind, link_id: str, endpoint: str, cost: int) -> PhysicalQP:
        qp = PhysicalQP(self._next_qp_id, kind, link_id, endpoint, cost)
        self._next_qp_id += 1
        self.qps[qp.qp_id] = qp
        self.qps_by_link.setdefault(link_id, []).append(qp)
        self.qp_links[qp.qp_id] = link_id
        return qp

    def create_dc_qp(self, link_id: str, endpoint: str = "server") -> PhysicalQP:
        qp = self._new_qp(QpKind.DYNAMICALLY_CONNECTED, link_id, endpoint, DC_QP_MEMORY_COST)
        qp.state = QpState.READY
        return qp

    def create_rc_ready(self, link_id: str, endpoint: str = "server") -> PhysicalQP:
        """Pre-established RC connection (world setup; handshake cost applies
        only to rebuilds)."""
        qp = self._new_qp(QpKind.RELIABLE_CONNECTED, link_id, endpoint, RC_QP_MEMORY_COST)
        qp.state = QpState.READY
        self.ah_cache.resolve(link_id, endpoint, self.clock.now)
        return qp

    def rc_connect(self, link_id: str, endpoint: str = "server",
                   on_done: Optional[Callable[[PhysicalQP, bool], None]] = None) -> PhysicalQP:
        """Asynchronous RC establishment; Ready after handshake_delay unless the
        link goes down first (ConnectFailed -> on_done(qp, False))."""
        qp = self._new_qp(QpKind.RELIABLE_CONNECTED, link_id, endpoint, RC_QP_MEMORY_COST)
        link = self.fabric.links[link_id]
        if link.state is LinkState.DOWN:
            qp.state = QpState.ERROR
            if on_done is not None:
                self.clock.schedule_call(self.clock.now, "connect_failed",
                                         lambda: on_done(qp, False))
            return qp
        qp.state = QpState.CONNECTING
        self.ah_cache.resolve(link_id, endpoint, self.clock.now)  # lazy-create + cache

        def ready() -> None:
            if qp.state is not QpState.CONNECTING:
                if qp.state is QpState.ERROR and on_done is not None:
                    on_done(qp, False)  # killed by a failure during the handshake
                return
            if self.fabric.links[link_id].state is LinkState.DOWN:
                qp.state = QpState.ERROR
                if on_done is not None:
                    on_done(qp, False)
                return
            qp.state = QpState.READY
            if on_done is not None:
                on_done(qp, True)

        self.clock.schedule_call(self.clock.now + self.handshake_delay, "rc_ready", ready)
        return qp

    def destroy_qp(self, qp: PhysicalQP) -> None:
        self.qps.pop(qp.qp_id, None)
        if qp in self.qps_by_link.get(qp.link_id, []):
            self.qps_by_link[qp.link_id].remove(qp)

    # --- posting ---

    def raw_post_send(self, qp: PhysicalQP, wr_list: "WorkRequest | list[WorkRequest]") -> list[PostedOp]:
        """Segment WRs and hand them to the wire in list order; one doorbell."""
        if qp.state is not QpState.READY:
            raise PostError(f"qp {qp.qp_id} in state {qp.state.value}")
        wrs = wr_chain_to_list(wr_list)
        link = self.fabric.links[qp.link_id]
        now = self.clock.now
        if self.clock.dispatch_log is not None:
            self.clock.dispatch_log.append(
                {"time": now, "kind": "doorbell", "link": qp.link_id,
                 "packet_id": None, "result": f"{len(wrs)} wrs"}
            )
        ops: list[PostedOp] = []
        i = 0
        while i < len(wrs):
            wr = wrs[i]
            if wr.inline and wr.payload_bytes > INLINE_THRESHOLD:
                raise PostError(f"inline wr exceeds {INLINE_THRESHOLD}B threshold")
            if wr.rkey is None and wr.opcode is not OpKind.SEND:
                wr.rkey = self.responder.regions.resolve_rkey(wr.remote_addr, qp.link_id)
            group = [wr]
            if wr.fused_into_next and i + 1 < len(wrs):
                nxt = wrs[i + 1]
                if nxt.rkey is None and nxt.opcode is not OpKind.SEND:
                    nxt.rkey = self.responder.regions.resolve_rkey(nxt.remote_addr, qp.link_id)
                group.append(nxt)
                i += 1
            ops.append(self._post_group(qp, link, group, now))
            i += 1
        return ops

    def _post_group(self, qp: PhysicalQP, link, group: list[WorkRequest], now: int) -> PostedOp:
        wire_bytes = sum(w.request_wire_bytes() for w in group)
        if len(group) == 1 and group[0].opcode in (OpKind.WRITE, OpKind.SEND):
            n_segments = max(1, math.ceil(wire_bytes / link.mtu))
        else:
            n_segments = 1  # reads, atomics, fused pairs: single packet
        sizes = []
        remaining = wire_bytes
        for _ in range(n_segments):
            seg = min(link.mtu, remaining) if remaining > 0 else 0
            sizes.append(seg)
            remaining -= seg
        first_psn = qp.next_psn
        qp.next_psn += n_segments
        op = PostedOp(
            op_id=self._next_op_id, qp=qp, wrs=group,
            first_psn=first_psn, last_psn=first_psn + n_segments - 1,
            n_segments=n_segments, post_time=now, segment_sizes=sizes,
        )
        self._next_op_id += 1
        qp.pending[op.last_psn] = op
        self._transmit_op_segments(op, link, now)
        return op

    def _transmit_op_segments(self, op: PostedOp, link, now: int) -> None:
        for k, size in enumerate(op.segment_sizes):
            packet = Packet(
                packet_id=self.fabric.new_packet_id(),
                src_qp=op.qp.qp_id,
                dst_qp=op.qp.qp_id,
                psn=op.first_psn + k,
                kind=PacketKind.REQUEST_SEGMENT,
                payload_bytes=size,
                carried_op=op,
                is_final_segment=(k == len(op.segment_sizes) - 1),
            )
            self.fabric.transmit(link, packet, "c2s", now)

    def replay_op_segments(self, op: PostedOp) -> None:
        """Re-send an op's original segments with their original PSNs
        (hardware-style same-QP retransmission; exercises ACK-cache dedup)."""
        link = self.fabric.links[op.qp.link_id]
        self._transmit_op_segments(op, link, self.clock.now)

    # --- ACK handling ---

    def on_packet(self, link_id: str, packet: Packet, time: int) -> None:
        if packet.kind is not PacketKind.ACK:
            return
        qp = self.qps.get(packet.dst_qp)
        if qp is None or qp.state is QpState.ERROR:
            return
        op = qp.pending.pop(packet.psn, None)
        if op is None:
            return  # duplicate ack for an already-resolved op
        status = getattr(packet, "status", "ok")
        for wr in op.wrs:
            wr.completed_at = time
        op.tail_wr.result = packet.ack_return_value
        if status == "ok" and op.on_acked is not None:
            op.on_acked(op)
        signaled = op.signaled_wr()
        if status != "ok" or signaled is not None:
            wr = signaled if signaled is not None else op.tail_wr
            qp.push_cqe(Completion(
                wr_id=wr.wr_id, status=status,
                return_value=(packet.ack_return_value if status == "ok" else None),
                qp_id=qp.qp_id, op=op,
            ))

    # --- failure plumbing ---

    def _on_physical_down(self, link_id: str, time: int) -> None:
        notify_at = time + self.detection_latency

        def detect() -> None:
            self._flush_error_qps(link_id)
            for handler in self.link_down_handlers:
                handler(link_id, self.clock.now)

        self.clock.schedule_call(notify_at, "link_down_detected", detect, link=link_id)

    def _on_physical_up(self, link_id: str, time: int) -> None:
        def notice() -> None:
            for handler in self.link_up_handlers:
                handler(link_id, self.clock.now)

        self.clock.schedule_call(time + self.detection_latency, "link_up_detected", notice, link=link_id)

    def _flush_error_qps(self, link_id: str) -> None:
        for qp in self.qps_by_link.get(link_id, []):
            if qp.state is QpState.ERROR:
                continue
            qp.state = QpState.ERROR
            for last_psn in sorted(qp.pending):
                op = qp.pending[last_psn]
                op.flushed = True
                wr = op.signaled_wr() or op.tail_wr
                qp.push_cqe(Completion(wr_id=wr.wr_id, status="flush_error",
                                       return_value=None, qp_id=qp.qp_id, op=op))
            qp.pending.clear()


def qp_memory_footprint(qps) -> int:
    """Total bytes of live QP allocations (RC/DC costs are model constants)."""
    return sum(qp.memory_cost for qp in qps)
