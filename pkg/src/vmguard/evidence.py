"""Evidence bundles and the content-addressed evidence store.

Store layout::

    <root>/bundles/<hex sha256 of bundle bytes>
    <root>/index.tsv            node_id, vm_id, tick, hash (tab-separated)
    <root>/trust_root.pub       hex publisher key used to verify custody
    <root>/analysis.tsv         deep-analysis verdicts per bundle

Every file is written to a temporary sibling and renamed into place, so a
crash leaves either the old or the new version, never a torn one.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .canonical import canonical_json
from .crypto import (
    CustodyAction,
    CustodyRecord,
    RecordCheck,
    SignatureScheme,
    hash_content,
    hex_digest,
    verify_custody,
)
from .detection import Verdict
from .errors import BundleNotFound, StoreUnreadable

log = logging.getLogger(__name__)


def verdict_to_dict(verdict: Verdict) -> dict:
    return {
        "infected": verdict.infected,
        "rule_id": verdict.rule_id,
        "score": None if verdict.score is None else repr(verdict.score),
    }


def verdict_from_dict(d: dict) -> Verdict:
    score = d.get("score")
    return Verdict(bool(d["infected"]), d.get("rule_id"), None if score is None else float(score))


@dataclass(frozen=True)
class BundleMeta:
    node_id: str
    vm_id: str
    halt_tick: int
    verdict: Verdict
    app_manifest: tuple[str, ...]
    snapshot_hash: bytes

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "vm_id": self.vm_id,
            "halt_tick": self.halt_tick,
            "verdict": verdict_to_dict(self.verdict),
            "app_manifest": list(self.app_manifest),
            "snapshot_hash": self.snapshot_hash.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BundleMeta":
        return cls(
            node_id=d["node_id"],
            vm_id=d["vm_id"],
            halt_tick=int(d["halt_tick"]),
            verdict=verdict_from_dict(d["verdict"]),
            app_manifest=tuple(d["app_manifest"]),
            snapshot_hash=bytes.fromhex(d["snapshot_hash"]),
        )


@dataclass(frozen=True)
class EvidenceBundle:
    snapshot: bytes = field(repr=False)
    meta: BundleMeta
    custody: tuple[CustodyRecord, ...] = ()

    @property
    def genesis(self) -> bytes:
        """Anchor of the custody chain: binds the chain to this snapshot."""
        return hash_content(canonical_json(self.meta.to_dict()))

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.meta.node_id, self.meta.vm_id, self.meta.halt_tick)

    def to_dict(self) -> dict:
        return {
            "snapshot": self.snapshot.hex(),
            "meta": self.meta.to_dict(),
            "custody": [r.to_dict() for r in self.custody],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceBundle":
        return cls(
            snapshot=bytes.fromhex(d["snapshot"]),
            meta=BundleMeta.from_dict(d["meta"]),
            custody=tuple(CustodyRecord.from_dict(r) for r in d["custody"]),
        )

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> "EvidenceBundle":
        return cls.from_dict(json.loads(data))

    def with_custody(self, chain) -> "EvidenceBundle":
        return EvidenceBundle(self.snapshot, self.meta, tuple(chain))

    def without_actions(self, *actions: CustodyAction) -> "EvidenceBundle":
        return self.with_custody(r for r in self.custody if r.action not in actions)


def bundle_checks(bundle: EvidenceBundle, root_pk: bytes, scheme=None) -> list[RecordCheck]:
    return verify_custody(bundle.genesis, list(bundle.custody), root_pk, scheme)


def bundle_intact(bundle: EvidenceBundle, root_pk: bytes, scheme=None) -> bool:
    if hash_content(bundle.snapshot) != bundle.meta.snapshot_hash:
        return False
    checks = bundle_checks(bundle, root_pk, scheme)
    return bool(checks) and checks[-1].chain_ok


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexEntry:
    node_id: str
    vm_id: str
    tick: int
    hash: str

    def line(self) -> str:
        return f"{self.node_id}\t{self.vm_id}\t{self.tick}\t{self.hash}\n"


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        dir_fd = os.open(path.parent, os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_index(root: Path | str) -> list[IndexEntry]:
    path = Path(root) / "index.tsv"
    if not path.exists():
        if not Path(root).is_dir():
            raise StoreUnreadable(f"{root}: not a directory")
        return []
    try:
        text = path.read_text()
    except OSError as exc:
        raise StoreUnreadable(f"{path}: {exc}") from None
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split("\t")
        if len(fields) != 4 or not fields[3] or not fields[2].lstrip("-").isdigit():
            raise StoreUnreadable(f"{path}: line {lineno} is corrupted: {line!r}")
        entries.append(IndexEntry(fields[0], fields[1], int(fields[2]), fields[3]))
    return entries


class EvidenceStore:
    """Content-addressed bundle store. Safe for one writer and many readers
    within a process."""

    def __init__(self, root: Path | str, trust_root: bytes | None = None):
        self.root = Path(root)
        self.bundle_dir = self.root / "bundles"
        self.bundle_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        pub = self.root / "trust_root.pub"
        if trust_root is not None and not pub.exists():
            atomic_write(pub, trust_root.hex().encode() + b"\n")
        self.entries = read_index(self.root)
        self._recover_unindexed()

    def _recover_unindexed(self) -> None:
        # a crash between the bundle rename and the index rename leaves an orphan
        known = {e.hash for e in self.entries}
        orphans = sorted(p.name for p in self.bundle_dir.iterdir() if not p.name.startswith("."))
        added = False
        for name in orphans:
            if name in known:
                continue
            data = (self.bundle_dir / name).read_bytes()
            if hex_digest(data) != name:
                log.warning("ignoring bundle file %s: content does not match its name", name)
                continue
            meta = EvidenceBundle.from_bytes(data).meta
            self.entries.append(IndexEntry(meta.node_id, meta.vm_id, meta.halt_tick, name))
            added = True
            log.info("re-indexed orphan bundle %s", name)
        if added:
            self._write_index()

    def _write_index(self) -> None:
        atomic_write(self.root / "index.tsv", "".join(e.line() for e in self.entries).encode())

    @property
    def trust_root(self) -> bytes:
        return read_trust_root(self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def find(self, node_id: str, vm_id: str, tick: int) -> IndexEntry | None:
        for e in self.entries:
            if (e.node_id, e.vm_id, e.tick) == (node_id, vm_id, tick):
                return e
        return None

    def put(self, bundle: EvidenceBundle) -> str:
        data = bundle.to_bytes()
        address = hex_digest(data)
        with self._lock:
            target = self.bundle_dir / address
            if not target.exists():
                atomic_write(target, data)
            if not any(e.hash == address for e in self.entries):
                m = bundle.meta
                self.entries.append(IndexEntry(m.node_id, m.vm_id, m.halt_tick, address))
                self._write_index()
        return address

    def get_bytes(self, address: str) -> bytes:
        return get_bundle_bytes(self.root, address)

    def get(self, address: str) -> EvidenceBundle:
        return EvidenceBundle.from_bytes(self.get_bytes(address))


def read_trust_root(root: Path | str) -> bytes:
    path = Path(root) / "trust_root.pub"
    try:
        return bytes.fromhex(path.read_text().strip())
    except (OSError, ValueError) as exc:
        raise StoreUnreadable(f"{path}: {exc}") from None


def get_bundle_bytes(root: Path | str, address: str) -> bytes:
    path = Path(root) / "bundles" / address
    if "/" in address or not path.is_file():
        raise BundleNotFound(address)
    return path.read_bytes()


# ---------------------------------------------------------------------------
# operator queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvidenceQuery:
    node_id: str | None = None
    tick_from: int | None = None
    tick_to: int | None = None

    def matches(self, e: IndexEntry) -> bool:
        if self.node_id is not None and e.node_id != self.node_id:
            return False
        if self.tick_from is not None and e.tick < self.tick_from:
            return False
        if self.tick_to is not None and e.tick > self.tick_to:
            return False
        return True


def evidence_list(root: Path | str, query: EvidenceQuery = EvidenceQuery()) -> list[IndexEntry]:
    rows = [e for e in read_index(root) if query.matches(e)]
    return sorted(rows, key=lambda e: (e.tick, e.node_id))


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool | None  # None: skipped


@dataclass(frozen=True)
class VerificationReport:
    address: str
    checks: tuple[Check, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


def evidence_verify(
    root: Path | str, address: str, scheme: SignatureScheme | None = None
) -> VerificationReport:
    data = get_bundle_bytes(root, address)
    checks = [Check("content_hash", hex_digest(data) == address)]
    if not checks[0].passed:
        checks.append(Check("custody_chain", None))
        return VerificationReport(address, tuple(checks))

    root_pk = read_trust_root(root)
    bundle = EvidenceBundle.from_bytes(data)
    checks.append(Check("snapshot_hash", hash_content(bundle.snapshot) == bundle.meta.snapshot_hash))
    record_checks = bundle_checks(bundle, root_pk, scheme)
    if not record_checks:
        checks.append(Check("custody_chain", False))
    for rc in record_checks:
        label = f"custody[{rc.index}]:{rc.action.value}:{rc.actor}"
        checks.append(Check(f"{label}:certificate", rc.cert_ok))
        checks.append(Check(f"{label}:signature", rc.signature_ok))
        checks.append(Check(f"{label}:link", rc.link_ok))
    return VerificationReport(address, tuple(checks))
