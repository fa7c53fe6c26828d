"""Baseline recovery policies behind the same interface as the full mechanism.

No-backup: plain RDMA, no logs, no backup QPs; in-flight work errors out.
Resend: local request log, synchronous RCQP rebuild on a standby link, then
blind retransmission of every in-flight request.
Resend-cache: like Resend but with a pre-established duplicate RCQP per vqp
on the backup link, so the rebuild stall disappears (memory doubles).

All four policies run inside the same FailoverRuntime so comparisons are
apples to apples.
"""

from __future__ import annotations

from .failover import (
    FailoverRuntime,
    PolicyBase,
    RecoveryReport,
    VarunaPolicy,
    VirtualQP,
    VqpState,
)
from .simnet import FailureEvent, FailureKind, LinkState
from .transport import PhysicalQP, QpState

POLICY_KINDS = ("no-backup", "resend", "resend-cache", "varuna")


class NoBackupPolicy(PolicyBase):
    """Standard RDMA usage: no request log, no completion log, no backups."""

    kind = "no-backup"

    def vqp_flags(self) -> dict:
        return {"log_locally": False, "log_remotely": False, "extend": False}

    def on_link_failure(self, link_id: str, affected: list[VirtualQP]) -> None:
        for vqp in affected:
            self.runtime.kill_vqp(vqp, "link_failed")


class ResendPolicy(PolicyBase):
    """Synchronous rebuild on a standby link, then blind retransmission."""

    kind = "resend"

    def vqp_flags(self) -> dict:
        return {"log_locally": True, "log_remotely": False, "extend": False}

    def on_link_failure(self, link_id: str, affected: list[VirtualQP]) -> None:
        for vqp in affected:
            vqp.recovering = True
            vqp.recovery_epoch += 1
            backup = self.runtime.select_backup_link(vqp, link_id)
            if backup is None:
                self.runtime.kill_vqp(vqp, "no_backup_link")
                continue
            rebuild_then_resend(self.runtime, vqp, backup, link_id)


class ResendCachePolicy(PolicyBase):
    """Pre-established duplicate RCQPs avoid the rebuild stall at 2x memory."""

    kind = "resend-cache"

    def __init__(self) -> None:
        super().__init__()
        self.backup_qps: dict[int, PhysicalQP] = {}

    def vqp_flags(self) -> dict:
        return {"log_locally": True, "log_remotely": False, "extend": False}

    def on_vqp_created(self, vqp: VirtualQP) -> None:
        if vqp.backup_order:
            self.backup_qps[vqp.vqp_id] = \
                self.runtime.requester.create_rc_ready(vqp.backup_order[0])

    def on_link_failure(self, link_id: str, affected: list[VirtualQP]) -> None:
        rt = self.runtime
        for vqp in affected:
            vqp.recovery_epoch += 1
            backup_qp = self.backup_qps.get(vqp.vqp_id)
            if backup_qp is not None and backup_qp.state is QpState.READY:
                old = vqp.conn.primary_rcqp
                if old is not None and old is not backup_qp:
                    rt.requester.destroy_qp(old)
                vqp.conn.primary_rcqp = backup_qp
                vqp.conn.current_qp = backup_qp
                del self.backup_qps[vqp.vqp_id]
                blind_retransmit(rt, vqp, link_id)
                self._replace_backup(vqp, backup_qp.link_id)
            else:
                # cached backup died with its link: behave like Resend
                vqp.recovering = True
                backup = rt.select_backup_link(vqp, link_id)
                if backup is None:
                    rt.kill_vqp(vqp, "no_backup_link")
                else:
                    rebuild_then_resend(rt, vqp, backup, link_id)

    def _replace_backup(self, vqp: VirtualQP, current_link: str) -> None:
        """Rebuild a fresh standby RCQP asynchronously after consuming one."""
        rt = self.runtime
        for link_id in [vqp.primary_link] + vqp.backup_order:
            link = rt.fabric.links.get(link_id)
            if link_id != current_link and link is not None and link.state is LinkState.UP:
                def done(qp: PhysicalQP, ok: bool, vqp_id=vqp.vqp_id) -> None:
                    if ok and vqp.state is not VqpState.DEAD:
                        self.backup_qps[vqp_id] = qp
                    elif ok:
                        rt.requester.destroy_qp(qp)
                rt.requester.rc_connect(link_id, "server", done)
                return

    def on_link_recovered(self, link_id: str) -> None:
        # standbys consumed while no spare link was up get rebuilt now
        for vqp in self.runtime.vqps.values():
            if (vqp.state is VqpState.ACTIVE
                    and vqp.vqp_id not in self.backup_qps
                    and vqp.conn.current_qp is not None
                    and vqp.conn.current_qp.link_id != link_id):
                self._replace_backup(vqp, vqp.conn.current_qp.link_id)


def rebuild_then_resend(runtime: FailoverRuntime, vqp: VirtualQP,
                        link_id: str, failed: str) -> None:
    """Synchronously (for this vqp) rebuild an RCQP, then blind-retransmit."""
    epoch = vqp.recovery_epoch

    def done(qp: PhysicalQP, ok: bool) -> None:
        if vqp.state is VqpState.DEAD or vqp.recovery_epoch != epoch:
            if ok:
                runtime.requester.destroy_qp(qp)
            return
        if not ok:
            nxt = runtime.select_backup_link(vqp, qp.link_id)
            if nxt is None:
                runtime.kill_vqp(vqp, "no_backup_link")
            else:
                rebuild_then_resend(runtime, vqp, nxt, failed)
            return
        old = vqp.conn.primary_rcqp
        if old is not None:
            runtime.requester.destroy_qp(old)
        vqp.conn.primary_rcqp = qp
        vqp.conn.current_qp = qp
        vqp.recovering = False
        blind_retransmit(runtime, vqp, failed)

    runtime.requester.rc_connect(link_id, "server", done)


def blind_retransmit(runtime: FailoverRuntime, vqp: VirtualQP, failed_link: str) -> None:
    """Re-post every in-flight request on the fresh QP, oldest first."""
    report = RecoveryReport(vqp_id=vqp.vqp_id, failure_link=failed_link,
                            started_at=runtime.clock.now)
    items: list[tuple[int, object]] = []
    for req in vqp.live_entries():
        req.wr.signaled = req.orig_signaled
        items.append((req.post_seq, req.wr))
    items.extend((u.post_seq, u.wr) for u in vqp.pending_unlogged)
    items.sort(key=lambda t: t[0])
    vqp.drop_window()
    vqp.pending_unlogged = []
    resend = []
    for _, wr in items:
        wr.attempt += 1
        wr.result = None
        wr.completed_at = None
        wr.rkey = None
        wr.entry_handle = None
        if wr.origin == "app":
            runtime.metrics.bytes_retransmitted += wr.request_wire_bytes()
            runtime.metrics.retransmissions.append(
                (wr.op_uid, wr.request_wire_bytes(), wr.attempt))
            report.retransmitted.append(wr.op_uid)
        resend.append(wr)
    report.finished_at = runtime.clock.now
    runtime.metrics.reports.append(report)
    if resend:
        runtime.post_send(vqp, resend)


def make_policy(kind: str) -> PolicyBase:
    table = {
        "no-backup": NoBackupPolicy,
        "resend": ResendPolicy,
        "resend-cache": ResendCachePolicy,
        "varuna": VarunaPolicy,
    }
    if kind not in table:
        raise ValueError(f"unknown policy {kind!r}; expected one of {POLICY_KINDS}")
    return table[kind]()


def on_failure(policy: PolicyBase, vqp: VirtualQP) -> None:
    """Run the policy's failure action for this vqp's current link."""
    policy.runtime.handle_link_failure(vqp.conn.current_qp.link_id)


def hazard_probe(policy_kind: str, inject: bool = True) -> dict:
    """Scripted two-client stale-overwrite schedule.

    Client 1 writes B over A; the write commits but the failure eats its ACK.
    Client 2 (on a healthy link) then writes C. A blind-retransmission policy
    replays B over C; the log-aware policy recognizes the write as executed
    and leaves C in place. Returns final value and inconsistency count.
    """
    from .world import LinkSpec, World, WorldParams

    value_a, value_b, value_c = 0xA1, 0xB2, 0xC3
    params = WorldParams(
        links=[LinkSpec("lnk0", 25, 1, 4096), LinkSpec("lnk1", 25, 1, 4096)],
        backup_order=["lnk1"],
        policy=policy_kind,
        seed=7,
    )
    world = World(params)
    vqp1 = world.runtime.create_vqp("lnk0", ["lnk1"])
    vqp2 = world.runtime.create_vqp("lnk1", [])
    region = world.runtime.register_app_region(4096)
    target = region.base_addr
    world.seed_memory(target, value_a)

    from .transport import WorkRequest
    from .simnet import OpKind

    payload = 4096
    link0 = world.fabric.links["lnk0"]
    ser_b = link0.serialization_delay(payload)
    ser_log = link0.serialization_delay(8)
    prop = link0.propagation_delay
    # after B's (and its log write's) commit, before the ACK returns
    t_fail = ser_b + ser_log + prop + prop // 2

    wr_b = WorkRequest(opcode=OpKind.WRITE, wr_id=1, remote_addr=target,
                       payload_bytes=payload, values=(value_b,))
    wr_c = WorkRequest(opcode=OpKind.WRITE, wr_id=2, remote_addr=target,
                       payload_bytes=payload, values=(value_c,))
    world.clock.schedule_call(0, "post_b", lambda: world.runtime.post_send(vqp1, [wr_b]))
    world.clock.schedule_call(t_fail + 50_000, "post_c",
                              lambda: world.runtime.post_send(vqp2, [wr_c]))
    if inject:
        world.fabric.inject_failure(FailureEvent("lnk0", t_fail, FailureKind.HARD_DOWN))
    world.run()

    final = world.responder.memory.read(target)
    return {
        "final_value": final,
        "expected_value": value_c,
        "inconsistencies": 0 if final == value_c else 1,
        "duplicate_b_commits": sum(
            1 for rec in world.responder.trace
            if rec.op_uid == wr_b.op_uid and rec.origin == "app") - 1,
    }
