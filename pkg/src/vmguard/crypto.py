"""Hashing, signatures, certificates, access tokens and custody chains.

Every key in a run is derived from a scenario seed, so two runs with the same
seed produce the same keys and (Ed25519 being deterministic) the same
signatures. A single publisher key acts as the trust root: it signs VM images
and certifies the keys of the server, the nodes and the security components.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .canonical import canonical_json
from .errors import MalformedKey

PUBLISHER = "publisher"
SERVER = "server"


def node_owner(node_id: str) -> str:
    return f"node:{node_id}"


def component_owner(component_id: str) -> str:
    return f"component:{component_id}"


def hash_content(data: bytes) -> bytes:
    """SHA-256 digest of ``data``."""
    return hashlib.sha256(data).digest()


def hex_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# signature schemes
# ---------------------------------------------------------------------------


class SignatureScheme(Protocol):
    name: str

    def keypair_from_seed(self, seed: bytes) -> tuple[bytes, bytes]: ...

    def sign(self, private_key: bytes, message: bytes) -> bytes: ...

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool: ...


class Ed25519Scheme:
    """Ed25519 over raw 32-byte keys."""

    name = "ed25519"
    key_length = 32

    def keypair_from_seed(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = hash_content(seed)
        pk = (
            Ed25519PrivateKey.from_private_bytes(sk)
            .public_key()
            .public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        )
        return sk, pk

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        if len(private_key) != self.key_length:
            raise MalformedKey(f"private key must be {self.key_length} bytes, got {len(private_key)}")
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        if len(public_key) != self.key_length:
            raise MalformedKey(f"public key must be {self.key_length} bytes, got {len(public_key)}")
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except InvalidSignature:
            return False
        return True


class ToyScheme:
    """Hash-based stand-in with the same interface; NOT unforgeable.

    Anyone holding the public key can produce a valid signature. It exists so
    tests can exercise the key plumbing without elliptic-curve arithmetic.
    """

    name = "toy"
    key_length = 32

    def keypair_from_seed(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = hash_content(b"toy-sk" + seed)
        return sk, hash_content(b"toy-pk" + sk)

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        if len(private_key) != self.key_length:
            raise MalformedKey(f"private key must be {self.key_length} bytes")
        return hash_content(b"toy-sig" + hash_content(b"toy-pk" + private_key) + message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        if len(public_key) != self.key_length:
            raise MalformedKey(f"public key must be {self.key_length} bytes")
        return signature == hash_content(b"toy-sig" + public_key + message)


DEFAULT_SCHEME: SignatureScheme = Ed25519Scheme()


def sign(private_key: bytes, message: bytes, scheme: SignatureScheme | None = None) -> bytes:
    return (scheme or DEFAULT_SCHEME).sign(private_key, message)


def verify(
    public_key: bytes, message: bytes, signature: bytes, scheme: SignatureScheme | None = None
) -> bool:
    return (scheme or DEFAULT_SCHEME).verify(public_key, message, signature)


# ---------------------------------------------------------------------------
# keys and the trust root
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes = field(repr=False)
    owner: str


def _cert_message(owner: str, public_key: bytes) -> bytes:
    return b"vmguard-cert\x00" + owner.encode() + b"\x00" + public_key


def check_cert(
    root_pk: bytes, owner: str, public_key: bytes, cert: bytes, scheme: SignatureScheme | None = None
) -> bool:
    try:
        return verify(root_pk, _cert_message(owner, public_key), cert, scheme)
    except MalformedKey:
        return False


class Pki:
    """Deterministic key material for one run.

    ``namespace`` separates independent roots; a node enrolled under a
    different namespace holds a certificate the real root never issued.
    """

    def __init__(self, seed: int, scheme: SignatureScheme | None = None, namespace: str = "vmguard"):
        self.seed = seed
        self.scheme = scheme or DEFAULT_SCHEME
        self.namespace = namespace
        self.publisher = self.keypair(PUBLISHER)
        self.server = self.keypair(SERVER)
        self.server_cert = self.certify(self.server)

    def keypair(self, owner: str) -> KeyPair:
        seed = f"{self.namespace}|{self.seed}|{owner}".encode()
        sk, pk = self.scheme.keypair_from_seed(seed)
        return KeyPair(public_key=pk, private_key=sk, owner=owner)

    def certify(self, keys: KeyPair) -> bytes:
        return self.scheme.sign(self.publisher.private_key, _cert_message(keys.owner, keys.public_key))

    def enroll(self, owner: str) -> tuple[KeyPair, bytes]:
        keys = self.keypair(owner)
        return keys, self.certify(keys)


# ---------------------------------------------------------------------------
# image integrity
# ---------------------------------------------------------------------------


def check_integrity(image, publisher_pk: bytes, scheme: SignatureScheme | None = None) -> bool:
    """True iff the image payload re-hashes to its content hash and the
    publisher signature over that hash verifies."""
    if hash_content(image.payload) != image.content_hash:
        return False
    try:
        return verify(publisher_pk, image.content_hash, image.signature, scheme)
    except MalformedKey:
        return False


# ---------------------------------------------------------------------------
# access tokens
# ---------------------------------------------------------------------------


class Resource(str, enum.Enum):
    GUEST_MEMORY = "GuestMemory"
    GUEST_DISK = "GuestDisk"
    NETWORK_TAP = "NetworkTap"


@dataclass(frozen=True)
class AccessToken:
    component_id: str
    resource: Resource
    expiry_tick: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return token_message(self.component_id, self.resource, self.expiry_tick)


def token_message(component_id: str, resource: Resource, expiry_tick: int) -> bytes:
    return canonical_json(
        {"component_id": component_id, "resource": Resource(resource).value, "expiry_tick": expiry_tick}
    )


def issue_token(
    server_sk: bytes,
    component_id: str,
    resource: Resource,
    expiry_tick: int,
    *,
    now_tick: int | None = None,
    scheme: SignatureScheme | None = None,
) -> AccessToken:
    if now_tick is not None and expiry_tick <= now_tick:
        raise ValueError(f"expiry_tick {expiry_tick} must be after issuance tick {now_tick}")
    resource = Resource(resource)
    sig = sign(server_sk, token_message(component_id, resource, expiry_tick), scheme)
    return AccessToken(component_id, resource, expiry_tick, sig)


def check_access(
    server_pk: bytes,
    token: AccessToken,
    resource: Resource,
    now_tick: int,
    scheme: SignatureScheme | None = None,
) -> bool:
    if token.resource != resource or not now_tick < token.expiry_tick:
        return False
    try:
        return verify(server_pk, token.signed_bytes(), token.signature, scheme)
    except MalformedKey:
        return False


# ---------------------------------------------------------------------------
# chain of custody
# ---------------------------------------------------------------------------


class CustodyAction(str, enum.Enum):
    SNAPSHOTTED = "Snapshotted"
    TRANSFERRED = "Transferred"
    STORED = "Stored"
    ANALYZED = "Analyzed"


@dataclass(frozen=True)
class CustodyRecord:
    """One signed link. ``actor_pk``/``actor_cert`` let a verifier holding only
    the trust root check the signature offline."""

    actor: str
    action: CustodyAction
    tick: int
    prev_hash: bytes
    actor_pk: bytes
    actor_cert: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return custody_message(self.prev_hash, self.action, self.tick, self.actor)

    def to_dict(self) -> dict:
        return {
            "actor": self.actor,
            "action": self.action.value,
            "tick": self.tick,
            "prev_hash": self.prev_hash.hex(),
            "actor_pk": self.actor_pk.hex(),
            "actor_cert": self.actor_cert.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CustodyRecord":
        return cls(
            actor=d["actor"],
            action=CustodyAction(d["action"]),
            tick=int(d["tick"]),
            prev_hash=bytes.fromhex(d["prev_hash"]),
            actor_pk=bytes.fromhex(d["actor_pk"]),
            actor_cert=bytes.fromhex(d["actor_cert"]),
            signature=bytes.fromhex(d["signature"]),
        )

    def digest(self) -> bytes:
        return hash_content(canonical_json(self.to_dict()))


def custody_message(prev_hash: bytes, action: CustodyAction, tick: int, actor: str) -> bytes:
    return canonical_json(
        {"prev": prev_hash.hex(), "action": CustodyAction(action).value, "tick": tick, "actor": actor}
    )


def append_custody(
    chain: list[CustodyRecord],
    genesis: bytes,
    keys: KeyPair,
    cert: bytes,
    action: CustodyAction,
    tick: int,
    scheme: SignatureScheme | None = None,
) -> list[CustodyRecord]:
    """Return a new chain with one record appended; ``chain`` is not modified."""
    prev = chain[-1].digest() if chain else genesis
    action = CustodyAction(action)
    sig = sign(keys.private_key, custody_message(prev, action, tick, keys.owner), scheme)
    record = CustodyRecord(keys.owner, action, tick, prev, keys.public_key, cert, sig)
    return [*chain, record]


@dataclass(frozen=True)
class RecordCheck:
    index: int
    action: CustodyAction
    actor: str
    cert_ok: bool
    signature_ok: bool
    link_ok: bool
    chain_ok: bool  # this record and every earlier one passed


def verify_custody(
    genesis: bytes,
    chain: list[CustodyRecord],
    root_pk: bytes,
    scheme: SignatureScheme | None = None,
) -> list[RecordCheck]:
    """Check every record; once one fails, every later record is reported broken."""
    checks = []
    prev = genesis
    intact = True
    for i, rec in enumerate(chain):
        cert_ok = check_cert(root_pk, rec.actor, rec.actor_pk, rec.actor_cert, scheme)
        try:
            sig_ok = verify(rec.actor_pk, rec.signed_bytes(), rec.signature, scheme)
        except MalformedKey:
            sig_ok = False
        link_ok = rec.prev_hash == prev
        intact = intact and cert_ok and sig_ok and link_ok
        checks.append(RecordCheck(i, rec.action, rec.actor, cert_ok, sig_ok, link_ok, intact))
        prev = rec.digest()
    return checks


def custody_intact(genesis: bytes, chain: list[CustodyRecord], root_pk: bytes, scheme=None) -> bool:
    checks = verify_custody(genesis, chain, root_pk, scheme)
    return bool(checks) and checks[-1].chain_ok
