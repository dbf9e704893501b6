"""Node/server message vocabulary, canonical encoding and framing.

A frame is a 4-byte big-endian body length followed by the body. The body is
the canonical encoding of one message: compact JSON with lexicographically
sorted keys, integers in decimal, byte strings as lowercase hex. Every
message carries its type name, the sender and a per-sender sequence number.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Any, ClassVar

from .canonical import canonical_json
from .crypto import AccessToken, Resource, SignatureScheme, sign, verify
from .detection import Verdict
from .errors import IncompleteFrame, MalformedKey, MalformedPayload, OversizeFrame
from .evidence import EvidenceBundle, verdict_from_dict, verdict_to_dict
from .model import NodeProfile, SecurityComponentDescriptor, VmImage, VmKind

MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct(">I")


# ---------------------------------------------------------------------------
# nested value codecs
# ---------------------------------------------------------------------------


def _profile_enc(p: NodeProfile) -> dict:
    return {
        "node_id": p.node_id,
        "node_class": p.node_class.value,
        "cpu_budget": p.cpu_budget,
        "mem_budget": p.mem_budget,
        "required_capabilities": sorted(p.required_capabilities),
    }


def _profile_dec(d: dict) -> NodeProfile:
    return NodeProfile(
        d["node_id"], d["node_class"], _int(d["cpu_budget"]), _int(d["mem_budget"]),
        frozenset(d["required_capabilities"]),
    )


def _image_enc(img: VmImage) -> dict:
    return {
        "image_id": img.image_id,
        "kind": img.kind.value,
        "payload": img.payload.hex(),
        "content_hash": img.content_hash.hex(),
        "signature": img.signature.hex(),
        "app_manifest": list(img.app_manifest),
    }


def _image_dec(d: dict) -> VmImage:
    return VmImage(
        image_id=d["image_id"],
        kind=VmKind(d["kind"]),
        payload=bytes.fromhex(d["payload"]),
        content_hash=bytes.fromhex(d["content_hash"]),
        signature=bytes.fromhex(d["signature"]),
        app_manifest=tuple(d["app_manifest"]),
    )


def _component_enc(c: SecurityComponentDescriptor) -> dict:
    return {
        "component_id": c.component_id,
        "version": c.version,
        "capabilities": sorted(c.capabilities),
        "cpu_cost": c.cpu_cost,
        "mem_cost": c.mem_cost,
        "public_key": c.public_key.hex(),
    }


def _component_dec(d: dict) -> SecurityComponentDescriptor:
    return SecurityComponentDescriptor(
        d["component_id"], _int(d["version"]), frozenset(d["capabilities"]),
        _int(d["cpu_cost"]), _int(d["mem_cost"]), bytes.fromhex(d["public_key"]),
    )


def _token_enc(t: AccessToken) -> dict:
    return {
        "component_id": t.component_id,
        "resource": t.resource.value,
        "expiry_tick": t.expiry_tick,
        "signature": t.signature.hex(),
    }


def _token_dec(d: dict) -> AccessToken:
    return AccessToken(d["component_id"], Resource(d["resource"]), _int(d["expiry_tick"]), bytes.fromhex(d["signature"]))


def _int(v: Any) -> int:
    if not isinstance(v, int) or isinstance(v, bool):
        raise TypeError(f"expected integer, got {v!r}")
    return v


def _str(v: Any) -> str:
    if not isinstance(v, str):
        raise TypeError(f"expected string, got {v!r}")
    return v


def _hex(v: Any) -> bytes:
    return bytes.fromhex(_str(v))


# codec per field kind: (encode, decode)
_KINDS: dict[str, tuple] = {
    "str": (lambda v: v, _str),
    "int": (lambda v: v, _int),
    "bytes": (lambda b: b.hex(), _hex),
    "profile": (_profile_enc, _profile_dec),
    "image": (_image_enc, _image_dec),
    "verdict": (verdict_to_dict, verdict_from_dict),
    "bundle": (lambda b: b.to_dict(), EvidenceBundle.from_dict),
    "components": (lambda cs: [_component_enc(c) for c in cs], lambda ds: tuple(_component_dec(d) for d in ds)),
    "tokens": (lambda ts: [_token_enc(t) for t in ts], lambda ds: tuple(_token_dec(d) for d in ds)),
    "attestation": (lambda a: a.to_dict(), lambda d: StackAttestation.from_dict(d)),
}


# ---------------------------------------------------------------------------
# attestation payloads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StackAttestation:
    """Node-signed measurement of its core image, plus the node's certified key."""

    node_id: str
    node_pk: bytes
    node_cert: bytes
    core_image_id: str
    core_hash: bytes
    core_signature: bytes
    signature: bytes = b""

    def _unsigned(self) -> dict:
        return {
            "node_id": self.node_id,
            "node_pk": self.node_pk.hex(),
            "node_cert": self.node_cert.hex(),
            "core_image_id": self.core_image_id,
            "core_hash": self.core_hash.hex(),
            "core_signature": self.core_signature.hex(),
        }

    def signed_bytes(self) -> bytes:
        return canonical_json(self._unsigned())

    def signed(self, node_sk: bytes, scheme: SignatureScheme | None = None) -> "StackAttestation":
        return replace(self, signature=sign(node_sk, self.signed_bytes(), scheme))

    def signature_ok(self, scheme: SignatureScheme | None = None) -> bool:
        try:
            return verify(self.node_pk, self.signed_bytes(), self.signature, scheme)
        except MalformedKey:
            return False

    def to_dict(self) -> dict:
        return {**self._unsigned(), "signature": self.signature.hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "StackAttestation":
        return cls(
            _str(d["node_id"]), _hex(d["node_pk"]), _hex(d["node_cert"]), _str(d["core_image_id"]),
            _hex(d["core_hash"]), _hex(d["core_signature"]), _hex(d["signature"]),
        )


def report_message(node_id: str, security_vm_hash: bytes) -> bytes:
    return canonical_json({"node_id": node_id, "security_vm_hash": security_vm_hash.hex()})


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------

MESSAGE_TYPES: dict[str, type["Message"]] = {}


@dataclass(frozen=True)
class Message:
    seq: int = 0
    sender: str = ""

    kinds: ClassVar[dict[str, str]] = {}

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        MESSAGE_TYPES[cls.__name__] = cls

    @property
    def type_name(self) -> str:
        return type(self).__name__

    def stamped(self, seq: int, sender: str) -> "Message":
        return replace(self, seq=seq, sender=sender)


@dataclass(frozen=True)
class JoinRequest(Message):
    node_id: str = ""
    profile: NodeProfile | None = None
    stack_attestation: StackAttestation | None = None
    kinds: ClassVar = {"node_id": "str", "profile": "profile", "stack_attestation": "attestation"}


@dataclass(frozen=True)
class ProvisionVm(Message):
    node_id: str = ""
    security_image: VmImage | None = None
    component_set: tuple[SecurityComponentDescriptor, ...] = ()
    tokens: tuple[AccessToken, ...] = ()
    kinds: ClassVar = {"node_id": "str", "security_image": "image", "component_set": "components", "tokens": "tokens"}


@dataclass(frozen=True)
class AttestationReport(Message):
    node_id: str = ""
    security_vm_hash: bytes = b""
    signature: bytes = b""
    kinds: ClassVar = {"node_id": "str", "security_vm_hash": "bytes", "signature": "bytes"}


@dataclass(frozen=True)
class AccessGrant(Message):
    node_id: str = ""
    lease_ticks: int = 0
    tokens: tuple[AccessToken, ...] = ()
    kinds: ClassVar = {"node_id": "str", "lease_ticks": "int", "tokens": "tokens"}


@dataclass(frozen=True)
class AccessDenied(Message):
    node_id: str = ""
    reason: str = ""
    kinds: ClassVar = {"node_id": "str", "reason": "str"}


@dataclass(frozen=True)
class InfectionReport(Message):
    node_id: str = ""
    vm_id: str = ""
    verdict: Verdict = Verdict(False)
    halt_tick: int = 0
    kinds: ClassVar = {"node_id": "str", "vm_id": "str", "verdict": "verdict", "halt_tick": "int"}


@dataclass(frozen=True)
class EvidenceTransfer(Message):
    bundle: EvidenceBundle | None = None
    kinds: ClassVar = {"bundle": "bundle"}


@dataclass(frozen=True)
class CleanVmDelivery(Message):
    node_id: str = ""
    vm_id: str = ""  # the quarantined machine this one replaces
    guest_image: VmImage | None = None
    kinds: ClassVar = {"node_id": "str", "vm_id": "str", "guest_image": "image"}


@dataclass(frozen=True)
class ComponentUpdate(Message):
    node_id: str = ""
    security_image: VmImage | None = None
    component_set: tuple[SecurityComponentDescriptor, ...] = ()
    tokens: tuple[AccessToken, ...] = ()
    kinds: ClassVar = {"node_id": "str", "security_image": "image", "component_set": "components", "tokens": "tokens"}


@dataclass(frozen=True)
class Ack(Message):
    ref_id: int = 0
    detail: str = ""
    kinds: ClassVar = {"ref_id": "int", "detail": "str"}


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def message_to_dict(message: Message) -> dict:
    out: dict[str, Any] = {"type": message.type_name, "seq": message.seq, "sender": message.sender}
    for name, kind in message.kinds.items():
        value = getattr(message, name)
        out[name] = None if value is None else _KINDS[kind][0](value)
    return out


def message_from_dict(d: dict) -> Message:
    try:
        cls = MESSAGE_TYPES[d["type"]]
        kwargs = {"seq": _int(d["seq"]), "sender": _str(d["sender"])}
        expected = {"type", "seq", "sender", *cls.kinds}
        if set(d) != expected:
            raise ValueError(f"fields {sorted(set(d) ^ expected)} do not match {cls.__name__}")
        for name, kind in cls.kinds.items():
            raw = d[name]
            kwargs[name] = None if raw is None else _KINDS[kind][1](raw)
        return cls(**kwargs)
    except MalformedPayload:
        raise
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise MalformedPayload(f"cannot decode message: {exc}") from None


def canonical_bytes(message: Message) -> bytes:
    return canonical_json(message_to_dict(message))


def parse_message(body: bytes) -> Message:
    try:
        d = json.loads(body.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"body is not canonical JSON: {exc}") from None
    if not isinstance(d, dict):
        raise MalformedPayload("body is not a map")
    return message_from_dict(d)


def encode_frame(message: Message, max_size: int = MAX_FRAME) -> bytes:
    body = canonical_bytes(message)
    if len(body) > max_size:
        raise OversizeFrame(f"message body is {len(body)} bytes, limit {max_size}")
    return HEADER.pack(len(body)) + body


def decode_frame(buf: bytes, max_size: int = MAX_FRAME) -> tuple[Message, bytes]:
    """Decode the first frame in ``buf``; return it with the unconsumed bytes."""
    if len(buf) < HEADER.size:
        raise IncompleteFrame(f"need {HEADER.size} header bytes, have {len(buf)}")
    (length,) = HEADER.unpack_from(buf)
    if length > max_size:
        raise OversizeFrame(f"declared length {length} exceeds limit {max_size}")
    end = HEADER.size + length
    if len(buf) < end:
        raise IncompleteFrame(f"frame declares {length} body bytes, have {len(buf) - HEADER.size}")
    return parse_message(bytes(buf[HEADER.size:end])), bytes(buf[end:])


class FrameDecoder:
    """Incremental decoder for one stream."""

    def __init__(self, max_size: int = MAX_FRAME):
        self.max_size = max_size
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while True:
            try:
                msg, rest = decode_frame(bytes(self._buf), self.max_size)
            except IncompleteFrame:
                return out
            out.append(msg)
            self._buf = bytearray(rest)

    @property
    def pending(self) -> int:
        return len(self._buf)
