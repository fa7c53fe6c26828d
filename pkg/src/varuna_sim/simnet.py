"""Deterministic discrete-event fabric.

Point-to-point links with bandwidth/propagation/MTU, packet transmission
with all-or-nothing mid-flight loss, link-down and link-flap injection,
and the responder-side atomic commit point that produces the ground-truth
ExecutionTrace.

Time is integer nanoseconds throughout; serialization delay is
ceil(bytes / bandwidth) so that identical (config, seed, schedule) runs
produce byte-identical event sequences. Events at equal time dispatch in
insertion order.

Memory model: the observable effect of a Write is an 8-byte value stamp at
the target address; payload length is carried separately and drives all
segmentation, serialization and byte accounting. CAS/FAA operate on the
same 8-byte slots. This keeps serial-replay equality exact without
materializing large payloads.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable, Optional

MASK64 = (1 << 64) - 1


class SchedulingInPast(Exception):
    """Raised when an event is scheduled before the clock's current time."""


class UnknownLink(Exception):
    """Raised when a failure targets a link id that does not exist."""


@dataclass
class SimEvent:
    kind: str
    fn: Callable[[], None]
    link: Optional[str] = None
    packet_id: Optional[int] = None
    result: Optional[str] = None
    cancelled: bool = False


class SimClock:
    """Event queue ordered by (time, insertion sequence)."""

    def __init__(self) -> None:
        self.now = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self.dispatch_log: Optional[list[dict]] = None  # set to [] to record

    def schedule(self, time: int, event: SimEvent) -> SimEvent:
        if time < self.now:
            raise SchedulingInPast(f"t={time} < now={self.now}")
        heapq.heappush(self._heap, (time, self._seq, event))
        self._seq += 1
        return event

    def schedule_call(self, time: int, kind: str, fn: Callable[[], None], **meta) -> SimEvent:
        return self.schedule(time, SimEvent(kind=kind, fn=fn, **meta))

    def cancel(self, event: SimEvent) -> None:
        event.cancelled = True

    def run(self, until: Optional[int] = None) -> None:
        while self._heap:
            time, _, event = self._heap[0]
            if until is not None and time > until:
                break
            heapq.heappop(self._heap)
            if event.cancelled:
                continue
            self.now = time
            event.fn()
            if self.dispatch_log is not None:
                self.dispatch_log.append(
                    {
                        "time": time,
                        "kind": event.kind,
                        "link": event.link,
                        "packet_id": event.packet_id,
                        "result": event.result,
                    }
                )
        if until is not None and until > self.now:
            self.now = until

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)


class LinkState(Enum):
    UP = "up"
    DOWN = "down"


class PacketKind(Enum):
    REQUEST_SEGMENT = "request_segment"
    ACK = "ack"


@dataclass
class Packet:
    packet_id: int
    src_qp: int
    dst_qp: int
    psn: int
    kind: PacketKind
    payload_bytes: int
    carried_op: object = None        # transport-level op this segment belongs to
    ack_return_value: object = None  # 8-byte value (or read data tuple) on ACKs
    is_final_segment: bool = True


class FailureKind(Enum):
    HARD_DOWN = "hard_down"
    FLAP = "flap"


@dataclass
class FailureEvent:
    link_id: str
    time: int
    kind: FailureKind
    recover_after: int = 0

    def __post_init__(self) -> None:
        if self.kind is FailureKind.FLAP and self.recover_after <= 0:
            raise ValueError("flap recover_after must be > 0")


@dataclass
class _Flight:
    packet: Packet
    direction: str
    send_time: int
    arrival_time: int
    event: SimEvent


class Link:
    """Full-duplex point-to-point link; each direction has its own FIFO wire."""

    DIRECTIONS = ("c2s", "s2c")

    def __init__(self, link_id: str, bandwidth: Fraction, propagation_delay: int, mtu: int):
        if mtu <= 0 or bandwidth <= 0:
            raise ValueError("mtu and bandwidth must be positive")
        self.link_id = link_id
        self.bandwidth = bandwidth  # bytes per ns
        self.propagation_delay = propagation_delay
        self.mtu = mtu
        self.state = LinkState.UP
        self.flap_schedule: list[tuple[int, int]] = []
        self._next_free = {d: 0 for d in self.DIRECTIONS}
        self._in_flight: dict[str, list[_Flight]] = {d: [] for d in self.DIRECTIONS}

    def serialization_delay(self, payload_bytes: int) -> int:
        if payload_bytes <= 0:
            return 0
        return math.ceil(Fraction(payload_bytes) / self.bandwidth)


class Fabric:
    """All links plus delivery hooks and the packet loss record."""

    def __init__(self, clock: SimClock):
        self.clock = clock
        self.links: dict[str, Link] = {}
        self.lost_packets: list[tuple[int, str, Packet]] = []  # (time, link, packet)
        self.delivered_packets: list[tuple[int, str, Packet]] = []
        self._next_packet_id = 0
        # direction -> receiver callback(link_id, packet, arrival_time); wired by nodes
        self.receivers: dict[str, Callable[[str, Packet, int], None]] = {}
        self.link_down_listeners: list[Callable[[str, int], None]] = []
        self.link_up_listeners: list[Callable[[str, int], None]] = []

    def add_link(self, link: Link) -> None:
        self.links[link.link_id] = link

    def new_packet_id(self) -> int:
        self._next_packet_id += 1
        return self._next_packet_id

    def transmit(self, link: Link, packet: Packet, direction: str, send_time: int) -> Optional[int]:
        """Hand a packet to the wire. Returns the arrival time, or None if Lost.

        A packet is lost iff the link is Down at send time or transitions to
        Down at any instant of its flight interval [send_time, arrival].
        """
        if packet.kind is PacketKind.REQUEST_SEGMENT and packet.payload_bytes > link.mtu:
            raise ValueError(f"segment {packet.payload_bytes}B exceeds mtu {link.mtu}")
        if link.state is LinkState.DOWN:
            self.lost_packets.append((send_time, link.link_id, packet))
            self._trace("lose", link.link_id, packet.packet_id, "down_at_send", send_time)
            return None
        start = max(send_time, link._next_free[direction])
        finish = start + link.serialization_delay(packet.payload_bytes)
        arrival = finish + link.propagation_delay
        link._next_free[direction] = finish

        flight = _Flight(packet, direction, send_time, arrival, None)  # type: ignore[arg-type]

        def deliver() -> None:
            link._in_flight[direction].remove(flight)
            self.delivered_packets.append((arrival, link.link_id, packet))
            self._trace("deliver", link.link_id, packet.packet_id, "delivered", arrival)
            receiver = self.receivers.get(direction)
            if receiver is not None:
                receiver(link.link_id, packet, arrival)

        flight.event = self.clock.schedule_call(
            arrival, "packet_arrival", deliver, link=link.link_id, packet_id=packet.packet_id
        )
        link._in_flight[direction].append(flight)
        return arrival

    def inject_failure(self, event: FailureEvent) -> None:
        """Schedule a link-down transition (and the flap recovery, if any)."""
        if event.link_id not in self.links:
            raise UnknownLink(event.link_id)
        link = self.links[event.link_id]

        def go_down() -> None:
            self._apply_down(link)

        self.clock.schedule_call(event.time, "link_down", go_down, link=link.link_id)
        if event.kind is FailureKind.FLAP:
            up_time = event.time + event.recover_after

            def go_up() -> None:
                self._apply_up(link)

            self.clock.schedule_call(up_time, "link_up", go_up, link=link.link_id)

    def _apply_down(self, link: Link) -> None:
        now = self.clock.now
        link.state = LinkState.DOWN
        for direction in Link.DIRECTIONS:
            for flight in list(link._in_flight[direction]):
                self.clock.cancel(flight.event)
                link._in_flight[direction].remove(flight)
                self.lost_packets.append((now, link.link_id, flight.packet))
                self._trace("lose", link.link_id, flight.packet.packet_id, "down_in_flight", now)
        self._trace("link_down", link.link_id, None, "down", now)
        for listener in self.link_down_listeners:
            listener(link.link_id, now)

    def _apply_up(self, link: Link) -> None:
        now = self.clock.now
        link.state = LinkState.UP
        for direction in Link.DIRECTIONS:
            link._next_free[direction] = now
        self._trace("link_up", link.link_id, None, "up", now)
        for listener in self.link_up_listeners:
            listener(link.link_id, now)

    def _trace(self, kind: str, link: Optional[str], packet_id: Optional[int], result: str, time: int) -> None:
        if self.clock.dispatch_log is not None:
            self.clock.dispatch_log.append(
                {"time": time, "kind": kind, "link": link, "packet_id": packet_id, "result": result}
            )


class OpKind(Enum):
    READ = "read"
    WRITE = "write"
    CAS = "cas"
    FAA = "faa"
    SEND = "send"


@dataclass
class CommitRecord:
    """One atomically applied responder operation; the oracle's unit."""

    seq: int
    op_uid: Optional[int]   # application op identity; None for protocol-internal ops
    origin: str             # app | log | slot_cas | confirm | recovery | protocol
    opcode: OpKind
    addr: int
    commit_time: int
    return_value: object
    qp_id: int
    attempt: int
    payload_bytes: int
    operands: tuple         # enough to re-apply: see ResponderMemory.apply


class ExecutionTrace:
    """Append-only responder-side ground truth, ordered by commit time then sequence."""

    def __init__(self) -> None:
        self.records: list[CommitRecord] = []

    def append(self, record: CommitRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class ResponderMemory:
    """8-byte-slot addressable responder memory."""

    def __init__(self) -> None:
        self.slots: dict[int, int] = {}

    def read(self, addr: int) -> int:
        return self.slots.get(addr, 0)

    def read_range(self, addr: int, length: int) -> tuple[int, ...]:
        return tuple(self.slots.get(addr + 8 * i, 0) for i in range(length // 8))

    def write(self, addr: int, value: int) -> None:
        self.slots[addr] = value & MASK64

    def image(self) -> dict[int, int]:
        return {a: v for a, v in self.slots.items() if v != 0}

    def apply(self, opcode: OpKind, addr: int, operands: tuple) -> object:
        """Apply one operation atomically; returns its wire return value.

        operands: WRITE -> (value,); CAS -> (compare, swap); FAA -> (add,);
        READ -> (length,); SEND -> (value,).
        """
        if opcode is OpKind.WRITE:
            for i, value in enumerate(operands):
                self.write(addr + 8 * i, value)
            return None
        if opcode is OpKind.CAS:
            compare, swap = operands
            original = self.read(addr)
            if original == compare:
                self.write(addr, swap)
            return original
        if opcode is OpKind.FAA:
            original = self.read(addr)
            self.write(addr, (original + operands[0]) & MASK64)
            return original
        if opcode is OpKind.READ:
            return self.read_range(addr, operands[0])
        if opcode is OpKind.SEND:
            for i, value in enumerate(operands):
                self.write(addr + 8 * i, value)
            return None
        raise ValueError(f"unknown opcode {opcode}")


def replay_trace(trace: ExecutionTrace) -> ResponderMemory:
    """Independent serial replay of CommitRecords; the memory-equality oracle."""
    mem = ResponderMemory()
    for rec in trace.records:
        mem.apply(rec.opcode, rec.addr, rec.operands)
    return mem
