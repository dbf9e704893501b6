"""Node layer stack, VM images and instances, and the VM lifecycle.

A node is modelled as hardware (an identifier), a core image holding the
kernel and virtualization system, any number of guest VMs, and at most one
security VM. User applications live inside guest payloads and are only
described by the image's app manifest.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .crypto import KeyPair, SignatureScheme, hash_content, sign, verify
from .errors import IllegalTransition, MalformedKey, TargetNotRunning


class Capability:
    """Well-known capability tags. Tags are plain strings compared exactly,
    so catalogs may introduce new ones."""

    SIGNATURE_SCAN = "SignatureScan"
    ANOMALY_SCAN = "AnomalyScan"
    FIREWALL_FILTER = "FirewallFilter"


class VmKind(str, enum.Enum):
    GUEST_OS = "GuestOs"
    SECURITY_ENV = "SecurityEnv"


class NodeClass(str, enum.Enum):
    DESKTOP = "Desktop"
    THIN_CLIENT = "ThinClient"
    MOBILE_HANDHELD = "MobileHandheld"


class VmState(str, enum.Enum):
    PROVISIONED = "Provisioned"
    RUNNING = "Running"
    HALTED = "Halted"
    QUARANTINED = "Quarantined"
    RETIRED = "Retired"


class VmEvent(str, enum.Enum):
    START = "Start"
    INFECTION_DETECTED = "InfectionDetected"
    SNAPSHOT_TAKEN = "SnapshotTaken"
    REPLACE = "Replace"


TRANSITIONS: dict[tuple[VmState, VmEvent], VmState] = {
    (VmState.PROVISIONED, VmEvent.START): VmState.RUNNING,
    (VmState.RUNNING, VmEvent.INFECTION_DETECTED): VmState.HALTED,
    (VmState.HALTED, VmEvent.SNAPSHOT_TAKEN): VmState.QUARANTINED,
    (VmState.QUARANTINED, VmEvent.REPLACE): VmState.RETIRED,
    # planned exchange of a healthy machine
    (VmState.RUNNING, VmEvent.REPLACE): VmState.RETIRED,
}

STOPPED_STATES = frozenset({VmState.HALTED, VmState.QUARANTINED, VmState.RETIRED})


def transition(state: VmState, event: VmEvent) -> VmState:
    try:
        return TRANSITIONS[(VmState(state), VmEvent(event))]
    except KeyError:
        raise IllegalTransition(VmState(state), VmEvent(event)) from None


@dataclass(frozen=True)
class VmImage:
    image_id: str
    kind: VmKind
    payload: bytes = field(repr=False)
    content_hash: bytes
    signature: bytes
    app_manifest: tuple[str, ...] = ()


def make_image(
    image_id: str,
    kind: VmKind,
    payload: bytes,
    publisher: KeyPair,
    app_manifest: Iterable[str] = (),
    scheme: SignatureScheme | None = None,
) -> VmImage:
    digest = hash_content(payload)
    return VmImage(
        image_id=image_id,
        kind=VmKind(kind),
        payload=payload,
        content_hash=digest,
        signature=sign(publisher.private_key, digest, scheme),
        app_manifest=tuple(app_manifest),
    )


class VmInstance:
    """Runtime machine. The image is immutable; ``payload`` is the live disk
    and memory content and may grow while the machine runs.

    Only the owning agent mutates ``state``, ``halt_tick`` and ``payload``.
    """

    def __init__(self, vm_id: str, image: VmImage, state: VmState = VmState.PROVISIONED):
        self.vm_id = vm_id
        self.image = image
        self.state = VmState(state)
        self.halt_tick: int | None = None
        self.payload = image.payload
        # (tick, payload length after the write); base content counts as tick -inf
        self._writes: list[tuple[int, int]] = []

    def __repr__(self) -> str:
        return f"VmInstance({self.vm_id!r}, {self.image.image_id!r}, {self.state.value})"

    def apply(self, event: VmEvent, tick: int) -> VmState:
        new_state = transition(self.state, event)
        if new_state in STOPPED_STATES and self.halt_tick is None:
            self.halt_tick = tick
        self.state = new_state
        return new_state

    def append(self, data: bytes, tick: int) -> None:
        if self.state is not VmState.RUNNING:
            raise TargetNotRunning(f"{self.vm_id} is {self.state.value}")
        self.payload = self.payload + data
        self._writes.append((tick, len(self.payload)))

    def visible_payload(self, as_of_tick: int) -> bytes:
        """Payload as it stood at the end of ``as_of_tick``."""
        length = len(self.image.payload)
        for tick, size in self._writes:
            if tick > as_of_tick:
                break
            length = size
        return self.payload[:length]

    @property
    def payload_hash(self) -> bytes:
        return hash_content(self.payload)


@dataclass
class LayerStack:
    hardware_id: str
    core_image: VmImage
    guest_vms: list[VmInstance] = field(default_factory=list)
    security_vm: VmInstance | None = None

    def guest(self, vm_id: str) -> VmInstance:
        for vm in self.guest_vms:
            if vm.vm_id == vm_id:
                return vm
        raise KeyError(vm_id)


@dataclass(frozen=True)
class NodeProfile:
    node_id: str
    node_class: NodeClass
    cpu_budget: int
    mem_budget: int
    required_capabilities: frozenset[str]

    def __post_init__(self):
        if self.cpu_budget < 0 or self.mem_budget < 0:
            raise ValueError("budgets must be non-negative")
        object.__setattr__(self, "node_class", NodeClass(self.node_class))
        object.__setattr__(self, "required_capabilities", frozenset(self.required_capabilities))


@dataclass(frozen=True)
class SecurityComponentDescriptor:
    component_id: str
    version: int
    capabilities: frozenset[str]
    cpu_cost: int
    mem_cost: int
    public_key: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "capabilities", frozenset(self.capabilities))
        if not self.capabilities:
            raise ValueError(f"{self.component_id}: capabilities must be non-empty")
        if self.cpu_cost < 0 or self.mem_cost < 0:
            raise ValueError(f"{self.component_id}: costs must be non-negative")

    @property
    def total_cost(self) -> int:
        return self.cpu_cost + self.mem_cost


# ---------------------------------------------------------------------------
# stack validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str = ""


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}


def _image_violations(image: VmImage, publisher_pk: bytes, prefix: str, subject: str, scheme):
    out = []
    if hash_content(image.payload) != image.content_hash:
        out.append(Violation(f"{prefix}HashMismatch", subject))
    try:
        good = verify(publisher_pk, image.content_hash, image.signature, scheme)
    except MalformedKey:
        good = False
    if not good:
        out.append(Violation(f"{prefix}BadSignature", subject))
    return out


def validate_stack(
    stack: LayerStack, publisher_pk: bytes, scheme: SignatureScheme | None = None
) -> ValidationReport:
    violations: list[Violation] = []
    violations += _image_violations(
        stack.core_image, publisher_pk, "CoreImage", stack.core_image.image_id, scheme
    )
    if stack.security_vm is None:
        violations.append(Violation("MissingSecurityVm", stack.hardware_id))
    else:
        violations += _image_violations(
            stack.security_vm.image, publisher_pk, "SecurityImage", stack.security_vm.vm_id, scheme
        )

    seen: set[str] = set()
    all_vms = list(stack.guest_vms) + ([stack.security_vm] if stack.security_vm else [])
    for vm in all_vms:
        if vm.vm_id in seen:
            violations.append(Violation("DuplicateVmId", vm.vm_id))
        seen.add(vm.vm_id)
    for vm in stack.guest_vms:
        violations += _image_violations(vm.image, publisher_pk, "GuestImage", vm.vm_id, scheme)
    return ValidationReport(tuple(violations))


# ---------------------------------------------------------------------------
# image fixture files
# ---------------------------------------------------------------------------

IMAGE_MAGIC = b"VMIMG1"


def image_to_bytes(image: VmImage) -> bytes:
    header = b"\n".join(
        [
            IMAGE_MAGIC,
            image.kind.value.encode(),
            image.image_id.encode(),
            ",".join(image.app_manifest).encode(),
        ]
    )
    return header + b"\n" + image.payload


def image_from_bytes(data: bytes, signature: bytes = b"") -> VmImage:
    parts = data.split(b"\n", 4)
    if len(parts) < 5 or parts[0] != IMAGE_MAGIC:
        raise ValueError("not a VMIMG1 image")
    _, kind, image_id, manifest, payload = parts
    manifest_s = manifest.decode()
    return VmImage(
        image_id=image_id.decode(),
        kind=VmKind(kind.decode()),
        payload=payload,
        content_hash=hash_content(payload),
        signature=signature,
        app_manifest=tuple(manifest_s.split(",")) if manifest_s else (),
    )


def write_image_file(path: Path | str, image: VmImage) -> None:
    """Write ``path`` in VMIMG1 form and the hex signature next to it as ``<path>.sig``."""
    path = Path(path)
    path.write_bytes(image_to_bytes(image))
    path.with_name(path.name + ".sig").write_text(image.signature.hex() + "\n")


def read_image_file(path: Path | str) -> VmImage:
    path = Path(path)
    sig_path = path.with_name(path.name + ".sig")
    signature = bytes.fromhex(sig_path.read_text().strip()) if sig_path.exists() else b""
    return image_from_bytes(path.read_bytes(), signature)
