"""Node agent: simulated hypervisor plus the security-environment guard.

The guard reads guest payloads from outside the guest, hands each installed
component the data it holds a valid token for, and executes the response.
An Infected verdict triggers the quarantine sequence in a fixed order: halt
the machine, report, snapshot it into an evidence bundle, send the bundle to
the server, and install the clean machine the server delivers in return.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Protocol

from .crypto import (
    AccessToken,
    CustodyAction,
    KeyPair,
    Resource,
    SignatureScheme,
    append_custody,
    check_access,
    check_integrity,
    hash_content,
    hex_digest,
    sign,
)
from .detection import (
    CAPABILITY_RESOURCE,
    Observation,
    SecurityEnvConfig,
    Verdict,
    analyse,
    parse_security_env,
)
from .errors import (
    IllegalTransition,
    IntegrityFailure,
    IntegritySelfCheckFailed,
    LinkDown,
    TransferFailed,
    UnadmittedNode,
)
from .events import EventLog
from .evidence import BundleMeta, EvidenceBundle
from .model import LayerStack, NodeProfile, SecurityComponentDescriptor, VmEvent, VmImage, VmInstance, VmState
from .wire import (
    AccessDenied,
    AccessGrant,
    Ack,
    AttestationReport,
    CleanVmDelivery,
    ComponentUpdate,
    EvidenceTransfer,
    InfectionReport,
    JoinRequest,
    Message,
    ProvisionVm,
    StackAttestation,
    report_message,
)

log = logging.getLogger(__name__)

TRANSFER_ATTEMPTS = 3
BACKOFF_TICKS = (1, 2, 4)


class Link(Protocol):
    """Ordered, reliable-while-up channel to the security server."""

    def request(self, msg: Message, tick: int) -> Message: ...

    def send(self, msg: Message, tick: int) -> None: ...

    def poll(self, tick: int) -> list[Message]: ...


class ResponseAction(str, enum.Enum):
    NONE = "None"
    HALT_AND_QUARANTINE = "HaltAndQuarantine"


@dataclass(frozen=True)
class GuardRecord:
    component_id: str
    capability: str
    observation: Observation
    verdict: Verdict
    action: ResponseAction


@dataclass(frozen=True)
class BootResult:
    admitted: bool
    reason: str = ""


@dataclass
class Incident:
    vm_id: str
    halt_tick: int
    verdict: Verdict
    bundle: EvidenceBundle | None = None
    address: str | None = None
    replacement_id: str | None = None
    replace_tick: int | None = None

    @property
    def downtime(self) -> int | None:
        return None if self.replace_tick is None else self.replace_tick - self.halt_tick


@dataclass
class _Outgoing:
    message: Message
    expects_reply: bool = True
    on_reply: object = None  # callable(reply, tick)


def build_join_request(
    profile: NodeProfile, stack: LayerStack, keys: KeyPair, cert: bytes, scheme: SignatureScheme | None = None
) -> JoinRequest:
    """JoinRequest carrying a fresh measurement of the core image."""
    core = stack.core_image
    att = StackAttestation(
        node_id=profile.node_id,
        node_pk=keys.public_key,
        node_cert=cert,
        core_image_id=core.image_id,
        core_hash=hash_content(core.payload),
        core_signature=core.signature,
    ).signed(keys.private_key, scheme)
    return JoinRequest(node_id=profile.node_id, profile=profile, stack_attestation=att)


class NodeAgent:
    def __init__(
        self,
        profile: NodeProfile,
        stack: LayerStack,
        keys: KeyPair,
        cert: bytes,
        link: Link,
        *,
        root_pk: bytes,
        server_pk: bytes,
        scheme: SignatureScheme | None = None,
        exposure_latency: int = 0,
        window: int | None = None,
        renew_margin: int = 10,
        self_check: bool = True,
        events: EventLog | None = None,
    ):
        self.profile = profile
        self.node_id = profile.node_id
        self.stack = stack
        self.keys = keys
        self.cert = cert
        self.link = link
        self.root_pk = root_pk
        self.server_pk = server_pk
        self.scheme = scheme
        self.exposure_latency = exposure_latency
        self.window = window
        self.renew_margin = renew_margin
        self.self_check = self_check
        self.events = events or EventLog(keep=False)

        self.status = "new"  # new | admitted | unadmitted | denied
        self.lease_expiry: int | None = None
        self.components: tuple[SecurityComponentDescriptor, ...] = ()
        self.tokens: dict[tuple[str, Resource], AccessToken] = {}
        self.env: SecurityEnvConfig | None = None
        self.incidents: dict[str, Incident] = {}
        self._outbox: list[_Outgoing] = []
        self._failures = 0
        self._next_attempt = 0
        self._seq = 0
        self._vm_counters = {"g": len(stack.guest_vms), "sec": 0}

    # -- bookkeeping -----------------------------------------------------------

    @property
    def admitted(self) -> bool:
        return self.status == "admitted"

    def _stamp(self, msg: Message) -> Message:
        self._seq += 1
        return msg.stamped(self._seq, self.node_id)

    def _new_vm_id(self, tag: str) -> str:
        self._vm_counters[tag] += 1
        return f"{self.node_id}.{tag}{self._vm_counters[tag]}"

    def _emit(self, tick: int, kind: str, digest: str = "", **detail) -> None:
        self.events.emit(tick, self.node_id, kind, digest, **detail)

    def running_guests(self) -> list[VmInstance]:
        return [vm for vm in self.stack.guest_vms if vm.state is VmState.RUNNING]

    def _install_tokens(self, tokens) -> None:
        self.tokens = {(t.component_id, t.resource): t for t in tokens}

    # -- admission -------------------------------------------------------------

    def boot_sequence(self, tick: int) -> BootResult:
        core = self.stack.core_image
        if self.self_check and not check_integrity(core, self.root_pk, self.scheme):
            self._emit(tick, "self_check_failed", image=core.image_id)
            self.status = "denied"
            raise IntegritySelfCheckFailed(f"{self.node_id}: core image {core.image_id} fails integrity")

        reply = self.link.request(self._stamp(build_join_request(self.profile, self.stack, self.keys, self.cert, self.scheme)), tick)
        if isinstance(reply, AccessDenied):
            return self._denied(reply.reason, tick)
        if not isinstance(reply, ProvisionVm):
            return self._denied(f"Unexpected{reply.type_name}", tick)
        try:
            self._install_security_vm(reply.security_image, reply.component_set, reply.tokens, tick)
        except IntegrityFailure:
            return self._denied("ProvisionIntegrity", tick)

        reply = self.link.request(self._attestation_report(), tick)
        if isinstance(reply, AccessDenied):
            return self._denied(reply.reason, tick)
        if not isinstance(reply, AccessGrant):
            return self._denied(f"Unexpected{reply.type_name}", tick)
        self._granted(reply, tick)
        for vm in self.stack.guest_vms:
            if vm.state is VmState.PROVISIONED:
                vm.apply(VmEvent.START, tick)
                self._emit(tick, "vm_start", vm.payload_hash.hex(), vm=vm.vm_id)
        return BootResult(True)

    def _denied(self, reason: str, tick: int) -> BootResult:
        self.status = "denied"
        self._emit(tick, "denied", reason=reason)
        return BootResult(False, reason)

    def _granted(self, grant: AccessGrant, tick: int) -> None:
        self.status = "admitted"
        self.lease_expiry = tick + grant.lease_ticks
        if grant.tokens:
            self._install_tokens(grant.tokens)
        self._emit(tick, "admitted", lease_expiry=self.lease_expiry)

    def _attestation_report(self) -> AttestationReport:
        measured = self.stack.security_vm.payload_hash
        sig = sign(self.keys.private_key, report_message(self.node_id, measured), self.scheme)
        return self._stamp(AttestationReport(node_id=self.node_id, security_vm_hash=measured, signature=sig))

    def _install_security_vm(self, image: VmImage, components, tokens, tick: int) -> None:
        if not check_integrity(image, self.root_pk, self.scheme):
            self._emit(tick, "integrity_failure", image.content_hash.hex(), image=image.image_id)
            raise IntegrityFailure(f"security image {image.image_id} fails integrity")
        env = parse_security_env(image.payload)
        old = self.stack.security_vm
        if old is not None and old.state is VmState.RUNNING:
            old.apply(VmEvent.REPLACE, tick)
        vm = VmInstance(self._new_vm_id("sec"), image)
        vm.apply(VmEvent.START, tick)
        # one assignment block, so no guard cycle ever sees a mixed set
        self.stack.security_vm = vm
        self.components = tuple(components)
        self.env = env
        self._install_tokens(tokens)
        self._emit(tick, "security_vm", image.content_hash.hex(), vm=vm.vm_id,
                   components=",".join(c.component_id for c in self.components))

    def renew_lease(self, tick: int) -> bool:
        reply = self.link.request(self._attestation_report(), tick)
        if isinstance(reply, AccessGrant):
            self._granted(reply, tick)
            return True
        self.status = "unadmitted"
        self._emit(tick, "lease_lost", reason=getattr(reply, "reason", reply.type_name))
        return False

    # -- guard -------------------------------------------------------------------

    def observe(self, vm: VmInstance, resource: Resource, tick: int) -> Observation:
        if vm.state is not VmState.RUNNING:
            raise IllegalTransition(vm.state, VmEvent.START)
        data = vm.visible_payload(tick - self.exposure_latency)
        if resource is Resource.NETWORK_TAP:
            data = data[len(vm.image.payload):]
        if self.window is not None and len(data) > self.window:
            data = data[-self.window:]
        return Observation(vm.vm_id, tick, resource, data)

    def guard_cycle(self, tick: int) -> list[GuardRecord]:
        if not self.admitted:
            return []
        components, env = self.components, self.env
        self._emit(tick, "cycle", components=",".join(c.component_id for c in components))
        records = []
        for vm in self.running_guests():
            infected = None
            for comp in components:
                for capability in sorted(comp.capabilities):
                    resource = CAPABILITY_RESOURCE.get(capability)
                    if resource is None:
                        continue
                    token = self.tokens.get((comp.component_id, resource))
                    if token is None or not check_access(self.server_pk, token, resource, tick, self.scheme):
                        self._emit(tick, "refuse", vm=vm.vm_id, component=comp.component_id, resource=resource.value)
                        continue
                    obs = self.observe(vm, resource, tick)
                    verdict = analyse(capability, obs, env)
                    action = ResponseAction.HALT_AND_QUARANTINE if verdict.infected else ResponseAction.NONE
                    records.append(GuardRecord(comp.component_id, capability, obs, verdict, action))
                    self._emit(tick, "observe", hex_digest(obs.data), vm=vm.vm_id, component=comp.component_id,
                               resource=resource.value, verdict=str(verdict))
                    if verdict.infected:
                        infected = verdict
                        break
                if infected:
                    break
            if infected:
                self._quarantine(vm, infected, tick)
        return records

    def _quarantine(self, vm: VmInstance, verdict: Verdict, tick: int) -> None:
        self.halt_vm(vm.vm_id, tick, verdict)
        report = InfectionReport(node_id=self.node_id, vm_id=vm.vm_id, verdict=verdict, halt_tick=tick)
        self._outbox.append(_Outgoing(report))
        try:
            self.snapshot_and_transfer(vm.vm_id, tick)
        except TransferFailed as exc:
            self._emit(tick, "transfer_deferred", vm=vm.vm_id, retry_tick=self._next_attempt)
            log.info("%s", exc)

    def halt_vm(self, vm_id: str, tick: int, verdict: Verdict | None = None) -> None:
        vm = self.stack.guest(vm_id)
        before = vm.payload_hash
        vm.apply(VmEvent.INFECTION_DETECTED, tick)
        self.incidents[vm_id] = Incident(vm_id, tick, verdict or Verdict(True, rule_id="manual"))
        self._emit(tick, "halt", before.hex(), vm=vm_id, verdict=str(self.incidents[vm_id].verdict))

    def snapshot_and_transfer(self, vm_id: str, tick: int) -> str:
        """Build the evidence bundle for a halted VM, quarantine the VM and ship
        the bundle. Returns the server's storage address."""
        vm = self.stack.guest(vm_id)
        incident = self.incidents.get(vm_id)
        if incident is None or vm.state is not VmState.HALTED:
            raise IllegalTransition(vm.state, VmEvent.SNAPSHOT_TAKEN)
        snapshot = bytes(vm.payload)
        meta = BundleMeta(self.node_id, vm_id, vm.halt_tick, incident.verdict, vm.image.app_manifest,
                          hash_content(snapshot))
        bundle = EvidenceBundle(snapshot, meta)
        chain = append_custody([], bundle.genesis, self.keys, self.cert, CustodyAction.SNAPSHOTTED, tick, self.scheme)
        vm.apply(VmEvent.SNAPSHOT_TAKEN, tick)
        self._emit(tick, "snapshot", meta.snapshot_hash.hex(), vm=vm_id)
        chain = append_custody(chain, bundle.genesis, self.keys, self.cert, CustodyAction.TRANSFERRED, tick, self.scheme)
        incident.bundle = bundle.with_custody(chain)

        def stored(reply: Message, at: int) -> None:
            if isinstance(reply, Ack):
                incident.address = reply.detail
                self._emit(at, "transfer_ok", reply.detail, vm=vm_id)
            else:
                self._emit(at, "transfer_rejected", vm=vm_id, reason=getattr(reply, "reason", reply.type_name))

        self._outbox.append(_Outgoing(EvidenceTransfer(bundle=incident.bundle), on_reply=stored))
        self.flush(tick, force=True)
        if incident.address is None:
            raise TransferFailed(f"{vm_id}: evidence not acknowledged; kept locally, retry at tick {self._next_attempt}")
        return incident.address

    # -- outbound queue ------------------------------------------------------------

    def flush(self, tick: int, force: bool = False) -> bool:
        """Send queued messages in order; True when the queue is empty."""
        if not force and tick < self._next_attempt:
            return not self._outbox
        while self._outbox:
            entry = self._outbox[0]
            reply = None
            for attempt in range(TRANSFER_ATTEMPTS):
                msg = self._stamp(entry.message)
                try:
                    if entry.expects_reply:
                        reply = self.link.request(msg, tick)
                    else:
                        self.link.send(msg, tick)
                    break
                except LinkDown:
                    self._emit(tick, "link_down", type=msg.type_name, attempt=attempt + 1)
            else:
                self._next_attempt = tick + BACKOFF_TICKS[min(self._failures, len(BACKOFF_TICKS) - 1)]
                self._failures += 1
                return False
            self._failures = 0
            if isinstance(reply, AccessDenied) and reply.reason == "Unadmitted":
                # server lost our lease (e.g. it restarted); re-join before retrying
                self.status = "unadmitted"
                self._emit(tick, "lease_lost", reason=reply.reason)
                return False
            self._outbox.pop(0)
            if entry.on_reply is not None:
                entry.on_reply(reply, tick)
        return True

    @property
    def backlog(self) -> int:
        return len(self._outbox)

    # -- server pushes -------------------------------------------------------------

    def replace_vm(self, vm_id: str, delivery: CleanVmDelivery, tick: int) -> VmInstance:
        old = self.stack.guest(vm_id)
        if old.state is not VmState.QUARANTINED:
            raise IllegalTransition(old.state, VmEvent.REPLACE)
        image = delivery.guest_image
        if image is None or not check_integrity(image, self.root_pk, self.scheme):
            self._emit(tick, "integrity_failure", vm=vm_id)
            raise IntegrityFailure(f"clean image for {vm_id} fails integrity")
        if image.app_manifest != old.image.app_manifest:
            raise IntegrityFailure(f"clean image manifest {image.app_manifest} != {old.image.app_manifest}")
        old.apply(VmEvent.REPLACE, tick)
        new = VmInstance(self._new_vm_id("g"), image)
        new.apply(VmEvent.START, tick)
        self.stack.guest_vms.append(new)
        incident = self.incidents.get(vm_id)
        if incident is not None:
            incident.replacement_id = new.vm_id
            incident.replace_tick = tick
        self._emit(tick, "replace", new.payload_hash.hex(), vm=vm_id, new_vm=new.vm_id, downtime=tick - old.halt_tick)
        return new

    def apply_component_update(self, update: ComponentUpdate, tick: int) -> Ack:
        if not self.admitted:
            raise UnadmittedNode(f"{self.node_id} is not admitted")
        self._install_security_vm(update.security_image, update.component_set, update.tokens, tick)
        return Ack(ref_id=update.seq)  # stamped by the send queue

    def on_push(self, msg: Message, tick: int) -> None:
        if isinstance(msg, CleanVmDelivery):
            try:
                self.replace_vm(msg.vm_id, msg, tick)
            except (IntegrityFailure, IllegalTransition, KeyError) as exc:
                log.warning("%s: rejected clean VM: %s", self.node_id, exc)
                return
            self._outbox.append(_Outgoing(Ack(ref_id=msg.seq), expects_reply=False))
        elif isinstance(msg, ComponentUpdate):
            try:
                ack = self.apply_component_update(msg, tick)
            except (IntegrityFailure, UnadmittedNode) as exc:
                log.warning("%s: rejected component update: %s", self.node_id, exc)
                return
            self._outbox.append(_Outgoing(ack, expects_reply=False))
        else:
            log.warning("%s: unexpected push %s", self.node_id, msg.type_name)
        self.flush(tick, force=True)

    # -- main loop -----------------------------------------------------------------

    def step(self, tick: int) -> list[GuardRecord]:
        """One tick of the agent's own work: re-admission, lease renewal,
        queued transfers, then the guard cycle."""
        try:
            if self.status == "unadmitted":
                self.boot_sequence(tick)
            if self.admitted and self.lease_expiry is not None and tick >= self.lease_expiry - self.renew_margin:
                self.renew_lease(tick)
        except LinkDown:
            self._emit(tick, "link_down", type="admission")
        if self.admitted and self._outbox:
            self.flush(tick)
        return self.guard_cycle(tick)

    def deliver(self, tick: int) -> None:
        try:
            pushes = self.link.poll(tick)
        except LinkDown:
            return
        for msg in pushes:
            self.on_push(msg, tick)
