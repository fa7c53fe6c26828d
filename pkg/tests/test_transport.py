"""Verbs layer: segmentation, PSN dedup, handshakes, AH cache, rkey tables."""

import pytest

from varuna_sim.simnet import (
    Fabric,
    FailureEvent,
    FailureKind,
    OpKind,
    SimClock,
)
from varuna_sim.transport import (
    DC_QP_MEMORY_COST,
    RC_QP_MEMORY_COST,
    PostError,
    QpState,
    Requester,
    Responder,
    WorkRequest,
    qp_memory_footprint,
    wr_chain_to_list,
)
from varuna_sim.world import LinkSpec


def build_stack(n_links=1, detection_latency=3_000_000, handshake=2_000_000):
    clock = SimClock()
    fabric = Fabric(clock)
    for i in range(n_links):
        fabric.add_link(LinkSpec(f"lnk{i}", 25, 1, 4096).build())
    responder = Responder(clock, fabric)
    requester = Requester(clock, fabric, responder, handshake_delay=handshake,
                          ah_create_delay=100_000, detection_latency=detection_latency)
    fabric.receivers["c2s"] = responder.on_packet
    fabric.receivers["s2c"] = requester.on_packet
    return clock, fabric, responder, requester


def register_region(responder, fabric, length=4096):
    region = responder.regions.allocate(length)
    responder.regions.register(region, list(fabric.links))
    return region


class TestPosting:
    def test_64kb_write_segments_into_16_consecutive_psns(self):
        clock, fabric, responder, requester = build_stack()
        region = register_region(responder, fabric, 65536)
        qp = requester.create_rc_ready("lnk0")
        wr = WorkRequest(opcode=OpKind.WRITE, remote_addr=region.base_addr,
                         payload_bytes=65536, values=(1,))
        ops = requester.raw_post_send(qp, [wr])
        assert len(ops) == 1
        assert ops[0].n_segments == 16
        assert ops[0].first_psn == 0 and ops[0].last_psn == 15
        assert sum(ops[0].segment_sizes) == 65536  # segmentation conserves bytes

    def test_post_on_error_qp_raises(self):
        clock, fabric, responder, requester = build_stack()
        qp = requester.create_rc_ready("lnk0")
        qp.state = QpState.ERROR
        with pytest.raises(PostError):
            requester.raw_post_send(qp, [WorkRequest(opcode=OpKind.READ)])

    def test_batch_posts_in_list_order_behind_one_doorbell(self):
        clock, fabric, responder, requester = build_stack()
        clock.dispatch_log = []
        region = register_region(responder, fabric, 64 * 4096)
        qp = requester.create_rc_ready("lnk0")
        wrs = [WorkRequest(opcode=OpKind.WRITE, wr_id=i,
                           remote_addr=region.base_addr + i * 64,
                           payload_bytes=4096, values=(i,)) for i in range(64)]
        ops = requester.raw_post_send(qp, wrs)
        assert [op.first_psn for op in ops] == list(range(64))
        doorbells = [e for e in clock.dispatch_log if e["kind"] == "doorbell"]
        assert len(doorbells) == 1
        clock.run()
        # delivery order on the wire matches list order
        arrivals = [p.psn for _, _, p in fabric.delivered_packets
                    if p.kind.name == "REQUEST_SEGMENT"]
        assert arrivals == sorted(arrivals)

    def test_inline_threshold_enforced(self):
        clock, fabric, responder, requester = build_stack()
        qp = requester.create_rc_ready("lnk0")
        big = WorkRequest(opcode=OpKind.WRITE, payload_bytes=128, inline=True)
        with pytest.raises(PostError):
            requester.raw_post_send(qp, [big])

    def test_wr_chain_materializes_and_rejects_cycles(self):
        a = WorkRequest(opcode=OpKind.READ)
        b = WorkRequest(opcode=OpKind.READ)
        a.next = b
        assert wr_chain_to_list(a) == [a, b]
        b.next = a
        with pytest.raises(ValueError):
            wr_chain_to_list(a)


class TestResponderDedup:
    def _commit_one(self, payload=4096):
        clock, fabric, responder, requester = build_stack()
        region = register_region(responder, fabric, payload)
        qp = requester.create_rc_ready("lnk0")
        wr = WorkRequest(opcode=OpKind.WRITE, remote_addr=region.base_addr,
                         payload_bytes=payload, values=(0xAB,))
        op = requester.raw_post_send(qp, [wr])[0]
        clock.run()
        return clock, fabric, responder, requester, qp, op

    def test_duplicate_psn_same_qp_suppressed_with_cached_ack(self):
        clock, fabric, responder, requester, qp, op = self._commit_one()
        assert len(responder.trace) == 1
        requester.replay_op_segments(op)
        clock.run()
        assert len(responder.trace) == 1  # no second commit
        assert responder.duplicates_suppressed >= 1
        acks = [p for _, _, p in fabric.delivered_packets if p.kind.name == "ACK"]
        assert len(acks) == 2  # original ack + re-emitted cached ack

    def test_same_op_on_fresh_qp_executes_again(self):
        """The motivating hazard: a new QP has an empty PSN window, so the
        standard dedup is bypassed and the op commits twice."""
        clock, fabric, responder, requester, qp, op = self._commit_one()
        fresh = requester.create_rc_ready("lnk0")
        wr = op.head_wr
        wr.rkey = None
        requester.raw_post_send(fresh, [wr])
        clock.run()
        assert len(responder.trace) == 2

    def test_out_of_order_final_segment_defers_commit(self):
        clock, fabric, responder, requester = build_stack()
        region = register_region(responder, fabric, 8192)
        qp = requester.create_rc_ready("lnk0")
        wr = WorkRequest(opcode=OpKind.WRITE, remote_addr=region.base_addr,
                         payload_bytes=8192, values=(7,))
        op = requester.raw_post_send(qp, [wr])[0]
        # deliver the final segment first, by hand
        from varuna_sim.simnet import Packet, PacketKind
        final = Packet(packet_id=999, src_qp=qp.qp_id, dst_qp=qp.qp_id, psn=1,
                       kind=PacketKind.REQUEST_SEGMENT, payload_bytes=4096,
                       carried_op=op, is_final_segment=True)
        responder.on_packet("lnk0", final, 10)
        assert len(responder.trace) == 0  # deferred: psn 0 missing
        first = Packet(packet_id=998, src_qp=qp.qp_id, dst_qp=qp.qp_id, psn=0,
                       kind=PacketKind.REQUEST_SEGMENT, payload_bytes=4096,
                       carried_op=op, is_final_segment=False)
        responder.on_packet("lnk0", first, 11)
        assert len(responder.trace) == 1


class TestConnections:
    def test_rc_connect_ready_after_handshake_delay(self):
        clock, fabric, responder, requester = build_stack()
        done = []
        qp = requester.rc_connect("lnk0", on_done=lambda q, ok: done.append((clock.now, ok)))
        assert qp.state is QpState.CONNECTING
        clock.run()
        assert qp.state is QpState.READY
        assert done == [(2_000_000, True)]

    def test_link_failure_mid_handshake_fails_connect(self):
        clock, fabric, responder, requester = build_stack()
        done = []
        qp = requester.rc_connect("lnk0", on_done=lambda q, ok: done.append(ok))
        fabric.inject_failure(FailureEvent("lnk0", 1_000_000, FailureKind.HARD_DOWN))
        clock.run()
        assert done == [False]
        assert qp.state is QpState.ERROR

    def test_64_parallel_handshakes_all_ready_together(self):
        clock, fabric, responder, requester = build_stack()
        qps = [requester.rc_connect("lnk0") for _ in range(64)]
        clock.run()
        assert all(q.state is QpState.READY for q in qps)
        assert clock.now == 2_000_000  # per-connection delay, not serialized

    def test_error_flush_generates_error_cqes_at_detection(self):
        clock, fabric, responder, requester = build_stack()
        region = register_region(responder, fabric, 1 << 20)
        qp = requester.create_rc_ready("lnk0")
        wr = WorkRequest(opcode=OpKind.WRITE, remote_addr=region.base_addr,
                         payload_bytes=1 << 20, values=(3,))
        requester.raw_post_send(qp, [wr])
        fabric.inject_failure(FailureEvent("lnk0", 10, FailureKind.HARD_DOWN))
        clock.run()
        assert qp.state is QpState.ERROR
        assert len(qp.cq) == 1
        assert qp.cq[0].status == "flush_error"


class TestAddressHandles:
    def test_first_resolution_pays_then_cached(self):
        clock, fabric, responder, requester = build_stack()
        assert requester.ah_cache.resolve("lnk0", "server", 0) == 100_000
        assert requester.ah_cache.resolve("lnk0", "server", 5) == 0
        assert len(requester.ah_cache) == 1

    def test_rc_setup_warms_cache_for_dc_use(self):
        clock, fabric, responder, requester = build_stack()
        requester.create_rc_ready("lnk0")
        assert requester.ah_cache.resolve("lnk0", "server", 7) == 0


class TestRegions:
    def test_two_nics_two_distinct_rkeys(self):
        clock, fabric, responder, requester = build_stack(n_links=2)
        region = register_region(responder, fabric)
        keys = {region.rkeys[(region.region_id, f"lnk{i}")] for i in range(2)}
        assert len(keys) == 2

    def test_every_registered_pair_resolves(self):
        clock, fabric, responder, requester = build_stack(n_links=3)
        regions = [register_region(responder, fabric, 256) for _ in range(4)]
        for region in regions:
            for link_id in fabric.links:
                assert responder.regions.rkey_for(region, link_id) is not None

    def test_wrong_nic_rkey_rejected(self):
        clock, fabric, responder, requester = build_stack(n_links=2)
        region = register_region(responder, fabric)
        qp = requester.create_rc_ready("lnk0")
        wrong = responder.regions.rkey_for(region, "lnk1")
        wr = WorkRequest(opcode=OpKind.WRITE, remote_addr=region.base_addr,
                         payload_bytes=8, values=(1,), rkey=wrong)
        requester.raw_post_send(qp, [wr])
        clock.run()
        assert len(responder.trace) == 0
        assert qp.cq[0].status == "remote_access_error"

    def test_auto_rkey_selects_per_link(self):
        clock, fabric, responder, requester = build_stack(n_links=2)
        region = register_region(responder, fabric)
        for link_id in ("lnk0", "lnk1"):
            qp = requester.create_rc_ready(link_id)
            wr = WorkRequest(opcode=OpKind.WRITE, remote_addr=region.base_addr,
                             payload_bytes=8, values=(1,))
            requester.raw_post_send(qp, [wr])
            assert wr.rkey == responder.regions.rkey_for(region, link_id)
        clock.run()
        assert len(responder.trace) == 2


class TestMemoryFootprint:
    def test_zero_qps_zero_bytes(self):
        assert qp_memory_footprint([]) == 0

    def test_rc_and_dc_costs_accumulate(self):
        clock, fabric, responder, requester = build_stack(n_links=2)
        for _ in range(3):
            requester.create_rc_ready("lnk0")
        requester.create_dc_qp("lnk1")
        total = qp_memory_footprint(requester.qps.values())
        assert total == 3 * RC_QP_MEMORY_COST + DC_QP_MEMORY_COST

    def test_destroy_removes_cost(self):
        clock, fabric, responder, requester = build_stack()
        qp = requester.create_rc_ready("lnk0")
        requester.destroy_qp(qp)
        assert qp_memory_footprint(requester.qps.values()) == 0
