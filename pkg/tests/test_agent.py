import dataclasses

import pytest

from _harness import make_agent, make_server, rogue_pki
from vmguard.agent import ResponseAction
from vmguard.catalog import core_image
from vmguard.crypto import CustodyAction, Resource, custody_intact, hash_content, issue_token
from vmguard.errors import IllegalTransition, IntegrityFailure, IntegritySelfCheckFailed, LinkDown
from vmguard.model import VmImage, VmState
from vmguard.wire import CleanVmDelivery, ComponentUpdate, EvidenceTransfer, JoinRequest


@pytest.fixture()
def server(pki, catalog, tmp_path):
    return make_server(pki, catalog, tmp_path / "store")


@pytest.fixture()
def agent(pki, server):
    a = make_agent(pki, server)
    assert a.boot_sequence(0).admitted
    return a


class TestBoot:
    def test_clean_stack(self, agent):
        assert agent.stack.security_vm.state is VmState.RUNNING
        assert all(vm.state is VmState.RUNNING for vm in agent.stack.guest_vms)

    def test_tampered_core_never_contacts_server(self, pki, server):
        core = core_image(pki)
        bad = VmImage(core.image_id, core.kind, core.payload[:-1] + b"?", core.content_hash, core.signature)
        a = make_agent(pki, server, core=bad)
        with pytest.raises(IntegritySelfCheckFailed):
            a.boot_sequence(0)
        assert a.link.sent == []

    def test_rogue_key_denied(self, pki, server):
        a = make_agent(pki, server, key_pki=rogue_pki())
        result = a.boot_sequence(0)
        assert not result.admitted and result.reason == "UnknownKey"
        assert all(vm.state is VmState.PROVISIONED for vm in a.stack.guest_vms)
        assert a.stack.security_vm is None

    def test_unreachable(self, pki, server):
        a = make_agent(pki, server)
        a.link.down = True
        with pytest.raises(LinkDown):
            a.boot_sequence(0)


class TestGuard:
    def test_clean_cycle(self, agent):
        records = agent.guard_cycle(1)
        assert records and all(not r.verdict.infected and r.action is ResponseAction.NONE for r in records)

    def test_planted_pattern_halts_same_tick(self, agent, rules):
        vm = agent.stack.guest_vms[0]
        vm.append(b"junk" + rules[2].pattern, 4)
        records = agent.guard_cycle(4)
        hit = [r for r in records if r.verdict.infected]
        assert len(hit) == 1 and hit[0].verdict.rule_id == rules[2].rule_id
        assert hit[0].action is ResponseAction.HALT_AND_QUARANTINE
        assert vm.halt_tick == 4 and vm.state is VmState.QUARANTINED

    def test_expired_token_gets_nothing(self, agent, pki):
        comp = agent.components[0]
        resource = [r for (c, r) in agent.tokens if c == comp.component_id][0]
        agent.tokens[(comp.component_id, resource)] = issue_token(pki.server.private_key, comp.component_id, resource, 5)
        records = agent.guard_cycle(5)
        assert not any(r.component_id == comp.component_id for r in records)
        assert any(r.component_id != comp.component_id for r in records)

    def test_forged_token_gets_nothing(self, agent):
        rogue = rogue_pki()
        for (cid, res) in list(agent.tokens):
            agent.tokens[(cid, res)] = issue_token(rogue.server.private_key, cid, res, 10**6)
        assert agent.guard_cycle(1) == []

    def test_token_gating_across_trace(self, pki, server, rules):
        a = make_agent(pki, server, guests=2)
        a.boot_sequence(0)
        a.guard_cycle(1)
        a.stack.guest_vms[1].append(rules[0].pattern, 2)
        for t in range(2, 6):
            for rec in a.guard_cycle(t):
                tok = a.tokens[(rec.component_id, rec.observation.resource)]
                assert t < tok.expiry_tick

    def test_latency_hides_recent_writes(self, pki, server, rules):
        a = make_agent(pki, server, exposure_latency=2)
        a.boot_sequence(0)
        vm = a.stack.guest_vms[0]
        vm.append(rules[0].pattern, 3)
        assert not any(r.verdict.infected for r in a.guard_cycle(3))
        assert not any(r.verdict.infected for r in a.guard_cycle(4))
        assert any(r.verdict.infected for r in a.guard_cycle(5))

    def test_window_bounds_observation(self, pki, server):
        a = make_agent(pki, server, window=64)
        a.boot_sequence(0)
        assert all(len(r.observation.data) <= 64 for r in a.guard_cycle(1))

    def test_network_tap_sees_only_traffic(self, agent):
        vm = agent.stack.guest_vms[0]
        vm.append(b"hello", 1)
        obs = agent.observe(vm, Resource.NETWORK_TAP, 1)
        assert obs.data == b"hello"
        assert agent.observe(vm, Resource.GUEST_DISK, 1).data == vm.payload

    def test_no_observations_of_stopped_vm(self, agent):
        vm = agent.stack.guest_vms[0]
        agent.halt_vm(vm.vm_id, 2)
        assert agent.guard_cycle(3) == []
        with pytest.raises(IllegalTransition):
            agent.observe(vm, Resource.GUEST_DISK, 3)


class TestHalt:
    def test_halt(self, agent):
        vm = agent.stack.guest_vms[0]
        before = vm.payload_hash
        agent.halt_vm(vm.vm_id, 7)
        assert vm.state is VmState.HALTED and vm.halt_tick == 7
        assert vm.payload_hash == before

    def test_halt_twice(self, agent):
        vm = agent.stack.guest_vms[0]
        agent.halt_vm(vm.vm_id, 7)
        with pytest.raises(IllegalTransition):
            agent.halt_vm(vm.vm_id, 8)
        assert vm.halt_tick == 7


class TestTransfer:
    def test_snapshot_matches_payload(self, agent, server):
        vm = agent.stack.guest_vms[0]
        vm.append(b"worm bytes", 2)
        agent.halt_vm(vm.vm_id, 2)
        address = agent.snapshot_and_transfer(vm.vm_id, 2)
        bundle = server.store.get(address)
        assert bundle.meta.snapshot_hash == hash_content(bundle.snapshot) == vm.payload_hash
        assert bundle.meta.halt_tick == 2

    def test_custody_sequence(self, agent, server, pki):
        vm = agent.stack.guest_vms[0]
        agent.halt_vm(vm.vm_id, 2)
        bundle = server.store.get(agent.snapshot_and_transfer(vm.vm_id, 2))
        assert [(r.action, r.actor) for r in bundle.custody] == [
            (CustodyAction.SNAPSHOTTED, "node:n1"), (CustodyAction.TRANSFERRED, "node:n1"), (CustodyAction.STORED, "server")]
        assert custody_intact(bundle.genesis, list(bundle.custody), pki.publisher.public_key)

    def test_outage_two_cycles_one_bundle(self, agent, server, rules):
        vm = agent.stack.guest_vms[0]
        vm.append(rules[0].pattern, 3)
        for tick in range(3, 12):
            agent.link.down = tick in (3, 4)
            agent.step(tick)
            agent.deliver(tick)
        assert len(server.store) == 1
        incident = agent.incidents[vm.vm_id]
        assert incident.address == server.store.entries[0].hash
        assert incident.replace_tick is not None and agent.backlog == 0

    def test_lost_ack_retried_without_duplicate(self, agent, server, rules):
        link = agent.link
        real_request = link.request
        dropped = []

        def flaky(msg, tick):
            reply = real_request(msg, tick)
            if isinstance(msg, EvidenceTransfer) and not dropped:
                dropped.append(reply)
                raise LinkDown("reply lost")
            return reply

        link.request = flaky
        vm = agent.stack.guest_vms[0]
        vm.append(rules[1].pattern, 2)
        for tick in range(2, 8):
            agent.step(tick)
            agent.deliver(tick)
        assert dropped and len(server.store) == 1
        deliveries = [m for m in link.received if isinstance(m, CleanVmDelivery)]
        assert len(deliveries) == 1
        assert agent.incidents[vm.vm_id].address == dropped[0].detail

    def test_rejoin_after_lease_loss(self, agent, server, rules):
        server.registry.clear()  # e.g. the server restarted
        vm = agent.stack.guest_vms[0]
        vm.append(rules[0].pattern, 2)
        for tick in range(2, 8):
            agent.step(tick)
            agent.deliver(tick)
        assert len(server.store) == 1 and agent.admitted
        assert sum(isinstance(m, JoinRequest) for m in agent.link.sent) == 2


class TestReplace:
    def quarantined(self, agent):
        vm = agent.stack.guest_vms[0]
        agent.halt_vm(vm.vm_id, 2)
        agent.snapshot_and_transfer(vm.vm_id, 2)
        return vm

    def test_valid_delivery(self, agent, server):
        vm = self.quarantined(agent)
        new = agent.replace_vm(vm.vm_id, server.issue_clean_vm("n1", vm.image.app_manifest, 3), 3)
        assert vm.state is VmState.RETIRED and new.state is VmState.RUNNING
        assert new.image.app_manifest == vm.image.app_manifest
        assert agent.incidents[vm.vm_id].downtime == 1

    def test_tampered_delivery(self, agent, server):
        vm = self.quarantined(agent)
        d = server.issue_clean_vm("n1", vm.image.app_manifest, 3)
        img = d.guest_image
        bad = dataclasses.replace(d, guest_image=dataclasses.replace(img, payload=img.payload + b"!"))
        n = len(agent.stack.guest_vms)
        with pytest.raises(IntegrityFailure):
            agent.replace_vm(vm.vm_id, bad, 3)
        assert vm.state is VmState.QUARANTINED and len(agent.stack.guest_vms) == n

    def test_wrong_manifest(self, agent, server):
        vm = self.quarantined(agent)
        with pytest.raises(IntegrityFailure):
            agent.replace_vm(vm.vm_id, server.issue_clean_vm("n1", ("terminal",), 3), 3)
        assert vm.state is VmState.QUARANTINED

    def test_not_quarantined(self, agent, server):
        vm = agent.stack.guest_vms[0]
        with pytest.raises(IllegalTransition):
            agent.replace_vm(vm.vm_id, server.issue_clean_vm("n1", vm.image.app_manifest, 3), 3)


class TestComponentUpdate:
    def test_atomic_swap(self, agent, server):
        comps = (server.catalog.component("suite"),)
        for t in range(1, 3):
            agent.guard_cycle(t)
        server.push_component_update("n1", comps, 3)
        agent.deliver(4)
        for t in range(4, 7):
            agent.guard_cycle(t)
        # every observation in a cycle comes from the set announced for that cycle
        active = None
        for ev in server.events.events:
            if ev.actor != "n1":
                continue
            if ev.kind == "cycle":
                active = set(ev.field("components").split(","))
            elif ev.kind == "observe":
                assert ev.field("component") in active
        assert agent.components == comps

    def test_old_security_vm_retired(self, agent, server):
        old = agent.stack.security_vm
        server.push_component_update("n1", (server.catalog.component("suite"),), 1)
        agent.deliver(2)
        assert old.state is VmState.RETIRED and agent.stack.security_vm.state is VmState.RUNNING
        assert all(vm.state is VmState.RUNNING for vm in agent.stack.guest_vms)

    def test_tampered_image_keeps_old_set(self, agent, server, pki):
        before = agent.components
        img = server.catalog.security_env_image
        bad_img = dataclasses.replace(img, payload=img.payload + b"\n")
        update = ComponentUpdate(node_id="n1", security_image=bad_img,
                                 component_set=(server.catalog.component("suite"),), tokens=())
        with pytest.raises(IntegrityFailure):
            agent.apply_component_update(update.stamped(5, "server"), 3)
        assert agent.components == before
