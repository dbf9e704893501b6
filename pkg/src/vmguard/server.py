"""The security server: admission, component provisioning, infection
handling, evidence storage and clean-VM delivery.

``SecurityServer.handle`` is the single entry point for node messages; it
returns exactly one direct reply (or None for acknowledgements) and queues
server-initiated messages (clean VMs, component updates) in an outbox that the
transport drains per node.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .catalog import ComponentCatalog, satisfies, select_components
from .crypto import (
    CustodyAction,
    Pki,
    append_custody,
    check_cert,
    hash_content,
    hex_digest,
    issue_token,
    node_owner,
    verify,
)
from .detection import CAPABILITY_RESOURCE, Observation, analyse, resources_for
from .errors import CustodyBroken, InfeasibleProfile, MalformedKey, UnadmittedNode, UnknownManifest
from .events import EventLog
from .evidence import EvidenceBundle, EvidenceStore, atomic_write, bundle_checks
from .model import NodeProfile, SecurityComponentDescriptor, VmImage
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
    canonical_bytes,
    report_message,
)

log = logging.getLogger(__name__)

DEFAULT_LEASE_TICKS = 600
SERVER_ID = "server"


@dataclass
class NodeRecord:
    profile: NodeProfile
    node_pk: bytes
    lease_expiry_tick: int
    component_set: tuple[SecurityComponentDescriptor, ...]
    core_hash: bytes
    security_vm_hash: bytes


@dataclass
class PendingAdmission:
    profile: NodeProfile
    node_pk: bytes
    component_set: tuple[SecurityComponentDescriptor, ...]
    core_hash: bytes
    security_vm_hash: bytes


@dataclass
class AnalysisJob:
    key: tuple[str, str, int]
    report_seq: int
    address: str | None = None
    verdicts: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Push:
    due_tick: int
    node_id: str
    message: Message


class SecurityServer:
    def __init__(
        self,
        catalog: ComponentCatalog,
        store: EvidenceStore,
        pki: Pki,
        *,
        lease_ticks: int = DEFAULT_LEASE_TICKS,
        provisioning_delay: int = 1,
        events: EventLog | None = None,
    ):
        bad = catalog.check(pki.publisher.public_key, pki.scheme)
        if bad:
            raise ValueError(f"catalog images fail integrity: {bad}")
        self.catalog = catalog
        self.store = store
        self.pki = pki
        self.scheme = pki.scheme
        self.lease_ticks = lease_ticks
        self.provisioning_delay = provisioning_delay
        self.events = events or EventLog(keep=False)

        self.registry: dict[str, NodeRecord] = {}
        self.pending: dict[str, PendingAdmission] = {}
        self.reports: dict[tuple[str, str, int], int] = {}
        self.analysis_queue: list[AnalysisJob] = []
        self.analysis_done: list[AnalysisJob] = []
        self.outbox: list[Push] = []
        self.pending_updates: dict[int, tuple[str, tuple[SecurityComponentDescriptor, ...], bytes]] = {}
        # incidents that already have a clean VM queued; a transfer retried after
        # a restart finds its bundle stored but still needs a replacement
        self.replaced: set[tuple[str, str, int]] = set()
        self._seq = 0
        self._lock = threading.RLock()

    # -- helpers -------------------------------------------------------------

    @property
    def root_pk(self) -> bytes:
        return self.pki.publisher.public_key

    def _stamp(self, msg: Message) -> Message:
        self._seq += 1
        return msg.stamped(self._seq, SERVER_ID)

    def is_admitted(self, node_id: str, now: int) -> bool:
        rec = self.registry.get(node_id)
        return rec is not None and now < rec.lease_expiry_tick

    def _require_admitted(self, node_id: str, now: int) -> NodeRecord:
        if not self.is_admitted(node_id, now):
            raise UnadmittedNode(f"{node_id} holds no valid lease at tick {now}")
        return self.registry[node_id]

    def _tokens(self, components, now: int):
        expiry = now + self.lease_ticks
        return tuple(
            issue_token(self.pki.server.private_key, c.component_id, r, expiry, now_tick=now, scheme=self.scheme)
            for c in components
            for r in resources_for(c.capabilities)
        )

    def _deny(self, node_id: str, reason: str, now: int) -> AccessDenied:
        self.events.emit(now, SERVER_ID, "deny", node=node_id, reason=reason)
        return self._stamp(AccessDenied(node_id=node_id, reason=reason))

    # -- dispatch ------------------------------------------------------------

    def handle(self, msg: Message, now: int) -> Message | None:
        with self._lock:
            self.events.emit(now, SERVER_ID, "recv", hex_digest(canonical_bytes(msg)),
                             type=msg.type_name, sender=msg.sender, seq=msg.seq)
            if isinstance(msg, JoinRequest):
                reply = self.handle_join(msg, now)
            elif isinstance(msg, AttestationReport):
                reply = self.handle_attestation(msg, now)
            elif isinstance(msg, InfectionReport):
                try:
                    reply = self.handle_infection_report(msg, now)
                except UnadmittedNode:
                    reply = self._deny(msg.node_id, "Unadmitted", now)
            elif isinstance(msg, EvidenceTransfer):
                reply = self._handle_transfer(msg, now)
            elif isinstance(msg, Ack):
                self._handle_ack(msg, now)
                reply = None
            else:
                log.warning("unexpected %s from %s", msg.type_name, msg.sender)
                reply = self._deny(msg.sender, f"Unexpected{msg.type_name}", now)
            if reply is not None:
                self.events.emit(now, SERVER_ID, "send", hex_digest(canonical_bytes(reply)),
                                 type=reply.type_name, to=msg.sender, seq=reply.seq)
            return reply

    # -- admission -----------------------------------------------------------

    def handle_join(self, request: JoinRequest, now: int) -> ProvisionVm | AccessDenied:
        att = request.stack_attestation
        profile = request.profile
        node_id = request.node_id
        if att is None or profile is None or not (node_id == profile.node_id == att.node_id):
            return self._deny(node_id, "Malformed", now)
        if not check_cert(self.root_pk, node_owner(node_id), att.node_pk, att.node_cert, self.scheme):
            return self._deny(node_id, "UnknownKey", now)
        if not att.signature_ok(self.scheme):
            return self._deny(node_id, "BadSignature", now)
        try:
            core_ok = verify(self.root_pk, att.core_hash, att.core_signature, self.scheme)
        except MalformedKey:
            core_ok = False
        if not core_ok:
            return self._deny(node_id, "IntegrityFailure", now)
        if not profile.required_capabilities:
            return self._deny(node_id, "NoRequiredCapabilities", now)
        try:
            components = select_components(profile, self.catalog.entries)
        except InfeasibleProfile:
            return self._deny(node_id, "InfeasibleProfile", now)

        image = self.catalog.security_env_image
        self.pending[node_id] = PendingAdmission(profile, att.node_pk, components, att.core_hash, image.content_hash)
        self.events.emit(now, SERVER_ID, "provision", node=node_id,
                         components=",".join(c.component_id for c in components))
        return self._stamp(ProvisionVm(node_id=node_id, security_image=image, component_set=components,
                                       tokens=self._tokens(components, now)))

    def handle_attestation(self, report: AttestationReport, now: int) -> AccessGrant | AccessDenied:
        node_id = report.node_id
        pending = self.pending.get(node_id)
        record = self.registry.get(node_id)
        if pending is not None:
            node_pk, expected = pending.node_pk, pending.security_vm_hash
        elif record is not None:
            node_pk, expected = record.node_pk, record.security_vm_hash
        else:
            self.events.emit(now, SERVER_ID, "attest", node=node_id, ok=0, reason="NoJoin")
            return self._deny(node_id, "NoJoin", now)

        try:
            sig_ok = verify(node_pk, report_message(node_id, report.security_vm_hash), report.signature, self.scheme)
        except MalformedKey:
            sig_ok = False
        reason = None
        if not sig_ok:
            reason = "BadSignature"
        elif report.security_vm_hash != expected:
            reason = "SecurityVmMismatch"
        if reason is not None:
            self.pending.pop(node_id, None)
            if record is not None:
                record.lease_expiry_tick = min(record.lease_expiry_tick, now)
            self.events.emit(now, SERVER_ID, "attest", node=node_id, ok=0, reason=reason)
            return self._deny(node_id, reason, now)

        if pending is not None:
            del self.pending[node_id]
            record = NodeRecord(pending.profile, pending.node_pk, now + self.lease_ticks,
                                pending.component_set, pending.core_hash, pending.security_vm_hash)
            self.registry[node_id] = record
        else:
            record.lease_expiry_tick = now + self.lease_ticks
        self.events.emit(now, SERVER_ID, "attest", node=node_id, ok=1)
        self.events.emit(now, SERVER_ID, "grant", node=node_id, lease_expiry=record.lease_expiry_tick)
        return self._stamp(AccessGrant(node_id=node_id, lease_ticks=self.lease_ticks,
                                       tokens=self._tokens(record.component_set, now)))

    # -- infection handling ----------------------------------------------------

    def handle_infection_report(self, report: InfectionReport, now: int) -> Ack:
        self._require_admitted(report.node_id, now)
        key = (report.node_id, report.vm_id, report.halt_tick)
        if key not in self.reports:
            self.reports[key] = report.seq
            self.analysis_queue.append(AnalysisJob(key, report.seq))
            self.events.emit(now, SERVER_ID, "report", node=report.node_id, vm=report.vm_id,
                             halt_tick=report.halt_tick, verdict=str(report.verdict))
        return self._stamp(Ack(ref_id=report.seq))

    def store_evidence(self, bundle: EvidenceBundle, now: int) -> str:
        """Persist ``bundle`` with a server-signed Stored record; return its address.

        Resubmitting a bundle that is already stored returns the existing
        address without writing anything.
        """
        submitted = bundle.without_actions(CustodyAction.STORED)
        if hash_content(bundle.snapshot) != bundle.meta.snapshot_hash:
            raise CustodyBroken("snapshot does not match its recorded hash")
        checks = bundle_checks(submitted, self.root_pk, self.scheme)
        if not checks or not checks[-1].chain_ok:
            bad = next((c.index for c in checks if not c.chain_ok), None)
            raise CustodyBroken(f"custody chain fails at record {bad}")
        if checks[0].actor != node_owner(bundle.meta.node_id) or checks[0].action is not CustodyAction.SNAPSHOTTED:
            raise CustodyBroken("chain must open with a Snapshotted record by the source node")

        existing = self.store.find(*bundle.key)
        if existing is not None:
            prior = self.store.get(existing.hash).without_actions(CustodyAction.STORED)
            if prior == submitted:
                self.events.emit(now, SERVER_ID, "duplicate", existing.hash, node=bundle.meta.node_id,
                                 vm=bundle.meta.vm_id)
                return existing.hash

        chain = append_custody(list(submitted.custody), submitted.genesis, self.pki.server, self.pki.server_cert,
                               CustodyAction.STORED, now, self.scheme)
        address = self.store.put(submitted.with_custody(chain))
        self.events.emit(now, SERVER_ID, "stored", address, node=bundle.meta.node_id, vm=bundle.meta.vm_id,
                         halt_tick=bundle.meta.halt_tick)
        self._run_analysis(submitted, address)
        return address

    def _run_analysis(self, bundle: EvidenceBundle, address: str) -> None:
        job = next((j for j in self.analysis_queue if j.key == bundle.key), None)
        if job is None:
            job = AnalysisJob(bundle.key, -1)
        else:
            self.analysis_queue.remove(job)
        job.address = address
        env = self.catalog.env_config
        for capability, resource in sorted(CAPABILITY_RESOURCE.items()):
            obs = Observation(bundle.meta.vm_id, bundle.meta.halt_tick, resource, bundle.snapshot)
            job.verdicts[capability] = str(analyse(capability, obs, env))
        self.analysis_done.append(job)
        lines = "".join(
            f"{j.address}\t{j.key[0]}\t{j.key[1]}\t{j.key[2]}\t"
            + ";".join(f"{k}={v}" for k, v in sorted(j.verdicts.items())) + "\n"
            for j in self.analysis_done
        )
        atomic_write(Path(self.store.root) / "analysis.tsv", lines.encode())

    def _handle_transfer(self, msg: EvidenceTransfer, now: int) -> Message:
        bundle = msg.bundle
        if bundle is None:
            return self._deny(msg.sender, "Malformed", now)
        node_id = bundle.meta.node_id
        if not self.is_admitted(node_id, now):
            return self._deny(node_id, "Unadmitted", now)
        try:
            address = self.store_evidence(bundle, now)
        except CustodyBroken as exc:
            log.warning("rejecting evidence from %s: %s", node_id, exc)
            return self._deny(node_id, "CustodyBroken", now)
        if bundle.key not in self.replaced:
            self.replaced.add(bundle.key)
            try:
                delivery = self.issue_clean_vm(node_id, bundle.meta.app_manifest, now, vm_id=bundle.meta.vm_id)
            except UnknownManifest:
                log.error("%s: no clean image for %s", node_id, bundle.meta.app_manifest)
            else:
                self.outbox.append(Push(now + self.provisioning_delay, node_id, delivery))
        return self._stamp(Ack(ref_id=msg.seq, detail=address))

    def issue_clean_vm(self, node_id: str, app_manifest, now: int, vm_id: str = "") -> CleanVmDelivery:
        self._require_admitted(node_id, now)
        image = self.catalog.clean_image(app_manifest)
        self.events.emit(now, SERVER_ID, "clean_vm", image.content_hash.hex(), node=node_id, vm=vm_id)
        return CleanVmDelivery(node_id=node_id, vm_id=vm_id, guest_image=image)

    # -- component exchange ------------------------------------------------------

    def push_component_update(
        self, node_id: str, component_set, now: int, security_image: VmImage | None = None
    ) -> ComponentUpdate:
        with self._lock:
            record = self._require_admitted(node_id, now)
            components = tuple(sorted(component_set, key=lambda c: c.component_id))
            if not satisfies(record.profile, components):
                raise InfeasibleProfile(f"{node_id}: pushed set does not fit the node profile")
            image = security_image or self.catalog.security_env_image
            update = ComponentUpdate(node_id=node_id, security_image=image, component_set=components,
                                     tokens=self._tokens(components, now))
            self.outbox.append(Push(now + self.provisioning_delay, node_id, update))
            self.events.emit(now, SERVER_ID, "update", node=node_id,
                             components=",".join(c.component_id for c in components))
            return update

    def _handle_ack(self, ack: Ack, now: int) -> None:
        pending = self.pending_updates.pop(ack.ref_id, None)
        if pending is None:
            return
        node_id, components, image_hash = pending
        record = self.registry.get(node_id)
        if record is not None and ack.sender == node_id:
            record.component_set = components
            record.security_vm_hash = image_hash
            self.events.emit(now, SERVER_ID, "update_acked", node=node_id,
                             components=",".join(c.component_id for c in components))

    # -- transport helpers -------------------------------------------------------

    def take_pushes(self, node_id: str, now: int | None = None) -> list[Message]:
        """Remove and return queued messages for ``node_id`` that are due by ``now``
        (all of them when ``now`` is None). Sequence numbers are assigned here so
        they increase in delivery order."""
        with self._lock:
            due = [p for p in self.outbox if p.node_id == node_id and (now is None or p.due_tick <= now)]
            out = []
            for p in due:
                self.outbox.remove(p)
                msg = self._stamp(p.message)
                if isinstance(msg, ComponentUpdate):
                    self.pending_updates[msg.seq] = (node_id, msg.component_set, msg.security_image.content_hash)
                out.append(msg)
            return out
