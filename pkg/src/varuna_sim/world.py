"""One simulation world: fabric + responder + requester + policy runtime.

A world is single-threaded and fully deterministic for a given
(parameters, seed, failure schedule); parallelism only ever happens across
independent worlds.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .failover import FailoverRuntime, PoolPolicy
from .simnet import (
    CommitRecord,
    Fabric,
    FailureEvent,
    Link,
    OpKind,
    SimClock,
    replay_trace,
)
from .transport import Requester, Responder


@dataclass
class LinkSpec:
    link_id: str
    bandwidth_gbps: float = 25.0
    propagation_us: float = 1.0
    mtu: int = 4096

    def build(self) -> Link:
        bandwidth = Fraction(str(self.bandwidth_gbps)) / 8  # bytes per ns
        return Link(self.link_id, bandwidth, int(self.propagation_us * 1000), self.mtu)


@dataclass
class WorldParams:
    links: list[LinkSpec]
    backup_order: list[str] = field(default_factory=list)
    policy: str = "varuna"
    seed: int = 0
    log_capacity: int = 128
    dcqp_policy: PoolPolicy = field(default_factory=lambda: PoolPolicy("fixed", 1))
    heartbeat_ms: float = 1.0
    heartbeat_misses: int = 3
    detection_us: Optional[float] = None  # overrides the heartbeat-derived latency
    handshake_delay_ms: float = 2.0
    ah_create_delay_us: float = 100.0
    extension_enabled: bool = True
    confirm_period_us: float = 100.0
    on_log_full: str = "error"
    migrate_back: bool = True
    psn_window_depth: int = 128

    @property
    def detection_latency_ns(self) -> int:
        if self.detection_us is not None:
            return int(self.detection_us * 1000)
        return int(self.heartbeat_ms * 1_000_000) * self.heartbeat_misses

    @property
    def handshake_delay_ns(self) -> int:
        return int(self.handshake_delay_ms * 1_000_000)


class World:
    def __init__(self, params: WorldParams, trace_dispatches: bool = False):
        from .policies import make_policy

        self.params = params
        self.clock = SimClock()
        if trace_dispatches:
            self.clock.dispatch_log = []
        self.fabric = Fabric(self.clock)
        for spec in params.links:
            self.fabric.add_link(spec.build())
        self.responder = Responder(self.clock, self.fabric, params.psn_window_depth)
        self.requester = Requester(
            self.clock, self.fabric, self.responder,
            handshake_delay=params.handshake_delay_ns,
            ah_create_delay=int(params.ah_create_delay_us * 1000),
            detection_latency=params.detection_latency_ns,
        )
        self.fabric.receivers["c2s"] = self.responder.on_packet
        self.fabric.receivers["s2c"] = self.requester.on_packet
        self.policy = make_policy(params.policy)
        self.rng = random.Random(f"{params.seed}|policy")
        self.runtime = FailoverRuntime(
            self.clock, self.fabric, self.requester, self.responder,
            self.policy, self.rng,
            log_capacity=params.log_capacity,
            pool_policy=params.dcqp_policy,
            extension_enabled=params.extension_enabled,
            on_log_full=params.on_log_full,
            confirm_period=int(params.confirm_period_us * 1000),
            migrate_back=params.migrate_back,
        )
        self.failure_times: list[int] = []

    def inject(self, event: FailureEvent) -> None:
        self.failure_times.append(event.time)
        self.fabric.inject_failure(event)

    def seed_memory(self, addr: int, value: int) -> None:
        """Pre-load responder memory through the commit trace so serial
        replay still reproduces the final image exactly."""
        self.responder.memory.write(addr, value)
        self.responder._commit_seq += 1
        self.responder.trace.append(CommitRecord(
            seq=self.responder._commit_seq, op_uid=None, origin="init",
            opcode=OpKind.WRITE, addr=addr, commit_time=self.clock.now,
            return_value=None, qp_id=0, attempt=0, payload_bytes=8,
            operands=(value,)))

    def run(self, until: Optional[int] = None) -> None:
        self.clock.run(until)

    @property
    def trace(self):
        return self.responder.trace

    def rtt_ns(self, link_id: str) -> int:
        """Generous one-round-trip bound: 2 x (propagation + MTU serialization)."""
        link = self.fabric.links[link_id]
        return 2 * (link.propagation_delay + link.serialization_delay(link.mtu))

    def self_check(self) -> list[str]:
        """Simulator ground-truth invariants; violations mean a model bug."""
        problems: list[str] = []
        replayed = replay_trace(self.trace).image()
        if replayed != self.responder.memory.image():
            problems.append("serial replay of the commit trace != responder memory")
        delivered = {p.packet_id for _, _, p in self.fabric.delivered_packets}
        lost = {p.packet_id for _, _, p in self.fabric.lost_packets}
        both = delivered & lost
        if both:
            problems.append(f"{len(both)} packets both delivered and lost")
        return problems
