"""Baseline policies, the scripted stale-overwrite hazard, and policy parity."""

import pytest

from varuna_sim.policies import POLICY_KINDS, hazard_probe, make_policy
from varuna_sim.simnet import FailureEvent, FailureKind
from varuna_sim.transport import RC_QP_MEMORY_COST, qp_memory_footprint
from varuna_sim.workloads import FailureSpec, MicrobenchSpec, run_microbench
from varuna_sim.world import LinkSpec, World, WorldParams


def two_link_params(policy, **kw):
    return WorldParams(links=[LinkSpec("lnk0", 25, 1, 4096),
                              LinkSpec("lnk1", 25, 1, 4096)],
                       backup_order=["lnk1"], policy=policy, **kw)


class TestFactory:
    def test_all_kinds_construct(self):
        for kind in POLICY_KINDS:
            assert make_policy(kind).kind == kind

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            make_policy("mystery")

    def test_on_failure_dispatches_for_the_vqps_link(self):
        from varuna_sim.policies import on_failure
        from varuna_sim.simnet import LinkState
        from varuna_sim.transport import QpKind

        world = World(two_link_params("varuna"))
        world.runtime.register_app_region(4096)
        vqp = world.runtime.create_vqp("lnk0", ["lnk1"])
        world.fabric.links["lnk0"].state = LinkState.DOWN
        on_failure(world.policy, vqp)
        assert vqp.conn.current_qp.kind is QpKind.DYNAMICALLY_CONNECTED


class TestHazardProbe:
    def test_blind_retransmission_overwrites_with_stale_value(self):
        for kind in ("resend", "resend-cache"):
            probe = hazard_probe(kind)
            assert probe["inconsistencies"] == 1
            assert probe["final_value"] != probe["expected_value"]
            assert probe["duplicate_b_commits"] == 1

    def test_log_aware_policy_preserves_final_value(self):
        probe = hazard_probe("varuna")
        assert probe["inconsistencies"] == 0
        assert probe["final_value"] == probe["expected_value"]
        assert probe["duplicate_b_commits"] == 0

    def test_without_failure_every_policy_agrees(self):
        for kind in POLICY_KINDS:
            probe = hazard_probe(kind, inject=False)
            assert probe["inconsistencies"] == 0, kind


class TestFailureFreeParity:
    def test_identical_final_memory_and_completions_across_policies(self):
        spec = MicrobenchSpec(op_mix="write", payload_bytes=4096, clients=2,
                              mode="batched", batch_size=8, ops_per_client=32)
        images = {}
        outcomes = {}
        for kind in POLICY_KINDS:
            result = run_microbench(two_link_params(kind), spec, FailureSpec(), seed=11)
            app_image = {a: v for a, v in
                         result.world.responder.memory.image().items()
                         if v & 0xFF == 0xA5}  # application stamps only
            images[kind] = app_image
            outcomes[kind] = sorted((u, r.status) for u, r in result.log.ops.items())
            assert result.completed_clients == 2
        baseline = images["no-backup"]
        for kind in POLICY_KINDS:
            assert images[kind] == baseline, kind
            assert outcomes[kind] == outcomes["no-backup"], kind


class TestResendBehavior:
    def test_resend_stalls_for_handshake_then_retransmits_everything(self):
        params = two_link_params("resend")
        spec = MicrobenchSpec(op_mix="write", payload_bytes=4096, clients=1,
                              mode="batched", batch_size=16, ops_per_client=16)
        failures = FailureSpec(events=[FailureEvent("lnk0", 20_000,
                                                    FailureKind.HARD_DOWN)])
        result = run_microbench(params, spec, failures, seed=0)
        in_flight = result.in_flight_at_failure()
        metrics = result.world.runtime.metrics
        assert metrics.bytes_retransmitted == result.in_flight_bytes()
        assert sorted(uid for uid, _, _ in metrics.retransmissions) == sorted(in_flight)
        first = result.first_resume_ns()
        detection = result.detection_time() - result.failure_times[0]
        assert first >= detection + params.handshake_delay_ns
        assert result.completed_clients == 1

    def test_resend_cache_skips_the_handshake_stall(self):
        params = two_link_params("resend-cache")
        spec = MicrobenchSpec(op_mix="write", payload_bytes=4096, clients=1,
                              mode="batched", batch_size=16, ops_per_client=16)
        failures = FailureSpec(events=[FailureEvent("lnk0", 20_000,
                                                    FailureKind.HARD_DOWN)])
        result = run_microbench(params, spec, failures, seed=0)
        first = result.first_resume_ns()
        detection = result.detection_time() - result.failure_times[0]
        assert first < detection + params.handshake_delay_ns
        assert result.world.runtime.metrics.bytes_retransmitted == \
            result.in_flight_bytes()
        assert result.completed_clients == 1

    def test_resend_cache_doubles_rcqp_memory(self):
        world_rc = World(two_link_params("resend-cache"))
        world_rc.runtime.register_app_region(4096)
        world_v = World(two_link_params("varuna"))
        world_v.runtime.register_app_region(4096)
        for _ in range(64):
            world_rc.runtime.create_vqp("lnk0", ["lnk1"])
            world_v.runtime.create_vqp("lnk0", ["lnk1"])
        mem_rc = qp_memory_footprint(world_rc.requester.qps.values())
        mem_v = qp_memory_footprint(world_v.requester.qps.values())
        assert mem_rc == 2 * 64 * RC_QP_MEMORY_COST
        ratio = mem_rc / mem_v
        assert 1.9 <= ratio <= 2.1

    def test_resend_cache_rebuilds_replacement_backup_after_use(self):
        params = two_link_params("resend-cache")
        spec = MicrobenchSpec(op_mix="write", payload_bytes=64, clients=1,
                              mode="sync", ops_per_client=200)
        failures = FailureSpec(events=[FailureEvent("lnk0", 10_000,
                                                    FailureKind.FLAP,
                                                    recover_after=4_000_000)])
        result = run_microbench(params, spec, failures, seed=0)
        policy = result.world.policy
        assert result.completed_clients == 1
        assert policy.backup_qps  # a fresh standby exists again

    def test_no_backup_aborts_with_zero_retransmission(self):
        params = two_link_params("no-backup")
        spec = MicrobenchSpec(op_mix="write", payload_bytes=4096, clients=2,
                              mode="batched", batch_size=16, ops_per_client=64)
        failures = FailureSpec(events=[FailureEvent("lnk0", 20_000,
                                                    FailureKind.HARD_DOWN)])
        result = run_microbench(params, spec, failures, seed=0)
        assert result.world.runtime.metrics.bytes_retransmitted == 0
        assert result.completed_clients == 0


class TestDuplicateWitness:
    def test_baselines_duplicate_on_cas_workload_varuna_never(self):
        spec = MicrobenchSpec(op_mix="cas", payload_bytes=8, clients=4,
                              mode="batched", batch_size=16, ops_per_client=64)
        # land the failure inside the active traffic window
        failures = FailureSpec(random_count=1, window_start_us=1,
                               window_end_us=8, link_id="lnk0")
        resend_dups = 0
        for seed in range(20):
            r = run_microbench(two_link_params("resend"), spec, failures, seed=seed)
            resend_dups += r.exactly_once().duplicate_cas
            rv = run_microbench(two_link_params("varuna"), spec, failures, seed=seed)
            assert rv.exactly_once().duplicate_cas == 0
        assert resend_dups > 0
