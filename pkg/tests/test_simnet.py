"""Event loop, link model, failure injection, and the responder commit point."""

import random
from fractions import Fraction

import pytest

from varuna_sim.simnet import (
    CommitRecord,
    ExecutionTrace,
    Fabric,
    FailureEvent,
    FailureKind,
    Link,
    LinkState,
    OpKind,
    Packet,
    PacketKind,
    ResponderMemory,
    SchedulingInPast,
    SimClock,
    UnknownLink,
    replay_trace,
)


def make_link(link_id="lnk0", bandwidth=1, propagation=1000, mtu=4096):
    return Link(link_id, Fraction(bandwidth), propagation, mtu)


def make_fabric(*links):
    clock = SimClock()
    fabric = Fabric(clock)
    for link in links or [make_link()]:
        fabric.add_link(link)
    return clock, fabric


def data_packet(fabric, psn=0, size=4096, final=True):
    return Packet(packet_id=fabric.new_packet_id(), src_qp=1, dst_qp=1, psn=psn,
                  kind=PacketKind.REQUEST_SEGMENT, payload_bytes=size,
                  is_final_segment=final)


class TestClock:
    def test_event_at_now_runs_before_later_events(self):
        clock = SimClock()
        order = []
        clock.schedule_call(1, "b", lambda: order.append("later"))
        clock.schedule_call(0, "a", lambda: order.append("now"))
        clock.run()
        assert order == ["now", "later"]

    def test_equal_time_dispatches_in_insertion_order(self):
        clock = SimClock()
        order = []
        clock.schedule_call(100, "a", lambda: order.append("A"))
        clock.schedule_call(100, "b", lambda: order.append("B"))
        clock.run()
        assert order == ["A", "B"]

    def test_scheduling_in_past_rejected(self):
        clock = SimClock()
        clock.schedule_call(10, "x", lambda: clock.schedule_call(5, "y", lambda: None))
        with pytest.raises(SchedulingInPast):
            clock.run()

    def test_time_monotonic_across_dispatch(self):
        clock = SimClock()
        seen = []
        for t in (5, 1, 9, 1, 3):
            clock.schedule_call(t, "e", lambda: seen.append(clock.now))
        clock.run()
        assert seen == sorted(seen)

    def test_10k_random_events_two_runs_identical(self):
        def run_once(seed):
            rng = random.Random(seed)
            clock = SimClock()
            log = []
            for i in range(10_000):
                t = rng.randrange(0, 5000)
                clock.schedule_call(t, f"e{i}", lambda i=i: log.append((clock.now, i)))
            clock.run()
            return log

        assert run_once(42) == run_once(42)


class TestTransmit:
    def test_arrival_time_is_serialization_plus_propagation(self):
        clock, fabric = make_fabric()
        link = fabric.links["lnk0"]
        arrival = fabric.transmit(link, data_packet(fabric), "c2s", 0)
        assert arrival == 4096 + 1000  # 4096 B at 1 B/ns, then 1000 ns propagation

    def test_down_link_loses_packet_at_send(self):
        clock, fabric = make_fabric()
        link = fabric.links["lnk0"]
        link.state = LinkState.DOWN
        packet = data_packet(fabric)
        assert fabric.transmit(link, packet, "c2s", 0) is None
        assert fabric.lost_packets[0][2] is packet

    def test_oversized_segment_rejected(self):
        clock, fabric = make_fabric()
        link = fabric.links["lnk0"]
        with pytest.raises(ValueError):
            fabric.transmit(link, data_packet(fabric, size=link.mtu + 1), "c2s", 0)

    def test_back_to_back_packets_serialize(self):
        clock, fabric = make_fabric()
        link = fabric.links["lnk0"]
        a1 = fabric.transmit(link, data_packet(fabric, psn=0), "c2s", 0)
        a2 = fabric.transmit(link, data_packet(fabric, psn=1), "c2s", 0)
        assert a2 - a1 == 4096  # second waits for the wire

    def test_mid_flight_failure_splits_batch_like_a_replay_oracle(self):
        """64 segments; failure mid-flight. The delivered/lost split must match
        an independent arithmetic replay of the schedule."""
        clock, fabric = make_fabric()
        link = fabric.links["lnk0"]
        packets = [data_packet(fabric, psn=i) for i in range(64)]
        arrivals = [fabric.transmit(link, p, "c2s", 0) for p in packets]
        fail_at = 150_000
        fabric.inject_failure(FailureEvent("lnk0", fail_at, FailureKind.HARD_DOWN))
        clock.run()

        # oracle: segment k serializes [4096k, 4096(k+1)), arrives at +1000
        expected_delivered = sum(1 for k in range(64) if 4096 * (k + 1) + 1000 < fail_at)
        delivered_ids = {p.packet_id for _, _, p in fabric.delivered_packets}
        lost_ids = {p.packet_id for _, _, p in fabric.lost_packets}
        assert len(delivered_ids) == expected_delivered
        assert len(lost_ids) == 64 - expected_delivered
        assert not (delivered_ids & lost_ids)
        assert delivered_ids | lost_ids == {p.packet_id for p in packets}
        assert arrivals == sorted(arrivals)


class TestFailureInjection:
    def test_unknown_link_rejected(self):
        clock, fabric = make_fabric()
        with pytest.raises(UnknownLink):
            fabric.inject_failure(FailureEvent("nope", 10, FailureKind.HARD_DOWN))

    def test_hard_down_is_permanent(self):
        clock, fabric = make_fabric()
        fabric.inject_failure(FailureEvent("lnk0", 10, FailureKind.HARD_DOWN))
        clock.run()
        assert fabric.links["lnk0"].state is LinkState.DOWN

    def test_flap_recovers_after_interval(self):
        clock, fabric = make_fabric()
        fabric.inject_failure(
            FailureEvent("lnk0", 10, FailureKind.FLAP, recover_after=5_000_000))
        clock.run(until=11)
        assert fabric.links["lnk0"].state is LinkState.DOWN
        clock.run()
        assert fabric.links["lnk0"].state is LinkState.UP

    def test_flap_requires_positive_recovery(self):
        with pytest.raises(ValueError):
            FailureEvent("lnk0", 10, FailureKind.FLAP, recover_after=0)

    def test_in_flight_packets_lost_on_failure(self):
        clock, fabric = make_fabric()
        link = fabric.links["lnk0"]
        for i in range(3):
            fabric.transmit(link, data_packet(fabric, psn=i), "c2s", 0)
        ack = Packet(packet_id=fabric.new_packet_id(), src_qp=1, dst_qp=1, psn=0,
                     kind=PacketKind.ACK, payload_bytes=0)
        fabric.transmit(link, ack, "s2c", 0)
        fabric.inject_failure(FailureEvent("lnk0", 100, FailureKind.HARD_DOWN))
        clock.run()
        assert len(fabric.lost_packets) == 4
        assert not fabric.delivered_packets

    def test_flap_symmetry_transmit_identical_after_recovery(self):
        clock, fabric = make_fabric()
        link = fabric.links["lnk0"]
        baseline = fabric.transmit(link, data_packet(fabric), "c2s", 0)
        fabric.inject_failure(FailureEvent("lnk0", 10_000, FailureKind.FLAP,
                                           recover_after=1_000))
        clock.run()
        t0 = clock.now
        again = fabric.transmit(link, data_packet(fabric), "c2s", t0)
        assert again - t0 == baseline  # same serialization + propagation


class TestResponderMemoryAndTrace:
    def test_write_then_read(self):
        mem = ResponderMemory()
        mem.apply(OpKind.WRITE, 0x100, (0xB,))
        assert mem.read(0x100) == 0xB

    def test_cas_success_returns_original(self):
        mem = ResponderMemory()
        mem.write(0x100, 0xA)
        assert mem.apply(OpKind.CAS, 0x100, (0xA, 0xB)) == 0xA
        assert mem.read(0x100) == 0xB

    def test_cas_failure_leaves_memory_and_returns_blocker(self):
        mem = ResponderMemory()
        mem.write(0x100, 0xC)
        assert mem.apply(OpKind.CAS, 0x100, (0xA, 0xB)) == 0xC
        assert mem.read(0x100) == 0xC

    def test_faa_returns_prior_and_adds(self):
        mem = ResponderMemory()
        mem.write(0x8, 41)
        assert mem.apply(OpKind.FAA, 0x8, (1,)) == 41
        assert mem.read(0x8) == 42

    def test_multiword_write_lands_every_word(self):
        mem = ResponderMemory()
        mem.apply(OpKind.WRITE, 0x20, (1, 2, 3))
        assert mem.read_range(0x20, 24) == (1, 2, 3)

    def test_empty_trace_replays_to_empty_image(self):
        assert replay_trace(ExecutionTrace()).image() == {}

    def test_single_cas_trace_differs_in_exactly_one_slot(self):
        trace = ExecutionTrace()
        trace.append(CommitRecord(seq=1, op_uid=1, origin="app", opcode=OpKind.CAS,
                                  addr=0x10, commit_time=5, return_value=0,
                                  qp_id=1, attempt=0, payload_bytes=8,
                                  operands=(0, 99)))
        image = replay_trace(trace).image()
        assert image == {0x10: 99}
