"""Security-component catalog and service selection.

Selection picks the cheapest component set (cpu_cost + mem_cost summed) that
covers every capability a node requires while staying inside both of its
budgets. Ties go to the lexicographically smallest sorted id tuple. Catalogs
with fewer than ``EXACT_LIMIT`` entries are solved exactly; larger ones fall
back to a greedy cost-per-new-capability heuristic that can miss the optimum
and can report a feasible profile as infeasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .crypto import Pki, check_integrity, component_owner
from .detection import SecurityEnvConfig, SignatureRule, parse_security_env, security_env_payload
from .errors import InfeasibleProfile, UnknownManifest
from .model import (
    Capability,
    NodeClass,
    NodeProfile,
    SecurityComponentDescriptor,
    VmImage,
    VmKind,
    make_image,
    read_image_file,
    write_image_file,
)

EXACT_LIMIT = 12


def set_cost(components: Iterable[SecurityComponentDescriptor]) -> tuple[int, int, int]:
    """(total, cpu, mem) cost of a component set."""
    cpu = mem = 0
    for c in components:
        cpu += c.cpu_cost
        mem += c.mem_cost
    return cpu + mem, cpu, mem


def satisfies(profile: NodeProfile, components: Sequence[SecurityComponentDescriptor]) -> bool:
    covered = set().union(*(c.capabilities for c in components)) if components else set()
    _, cpu, mem = set_cost(components)
    return profile.required_capabilities <= covered and cpu <= profile.cpu_budget and mem <= profile.mem_budget


def select_components(
    profile: NodeProfile, entries: Iterable[SecurityComponentDescriptor]
) -> tuple[SecurityComponentDescriptor, ...]:
    pool = sorted(entries, key=lambda c: c.component_id)
    if not pool:
        raise ValueError("catalog is empty")
    if len(pool) < EXACT_LIMIT:
        chosen = _branch_and_bound(profile, pool)
    else:
        chosen = _greedy(profile, pool)
    if chosen is None:
        raise InfeasibleProfile(
            f"{profile.node_id}: no component set covers {sorted(profile.required_capabilities)} "
            f"within cpu={profile.cpu_budget} mem={profile.mem_budget}"
        )
    return tuple(chosen)


def _branch_and_bound(profile: NodeProfile, pool: list[SecurityComponentDescriptor]):
    need = profile.required_capabilities
    n = len(pool)
    # capabilities still obtainable from pool[i:]
    suffix_caps = [frozenset()] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix_caps[i] = suffix_caps[i + 1] | pool[i].capabilities

    best_key: tuple | None = None
    best: list | None = None
    chosen: list[SecurityComponentDescriptor] = []

    def visit(i: int, covered: frozenset, cpu: int, mem: int) -> None:
        nonlocal best_key, best
        if best_key is not None and cpu + mem > best_key[0]:
            return
        if not need <= covered | suffix_caps[i]:
            return
        if i == n:
            key = (cpu + mem, tuple(c.component_id for c in chosen))
            if best_key is None or key < best_key:
                best_key, best = key, list(chosen)
            return
        c = pool[i]
        if cpu + c.cpu_cost <= profile.cpu_budget and mem + c.mem_cost <= profile.mem_budget:
            chosen.append(c)
            visit(i + 1, covered | c.capabilities, cpu + c.cpu_cost, mem + c.mem_cost)
            chosen.pop()
        visit(i + 1, covered, cpu, mem)

    visit(0, frozenset(), 0, 0)
    return best


def _greedy(profile: NodeProfile, pool: list[SecurityComponentDescriptor]):
    missing = set(profile.required_capabilities)
    chosen: list[SecurityComponentDescriptor] = []
    cpu = mem = 0
    while missing:
        best = None
        for c in pool:
            if c in chosen:
                continue
            gain = len(c.capabilities & missing)
            if not gain or cpu + c.cpu_cost > profile.cpu_budget or mem + c.mem_cost > profile.mem_budget:
                continue
            ratio = c.total_cost / gain
            if best is None or ratio < best[0]:
                best = (ratio, c)
        if best is None:
            return None
        c = best[1]
        chosen.append(c)
        cpu += c.cpu_cost
        mem += c.mem_cost
        missing -= c.capabilities
    return sorted(chosen, key=lambda c: c.component_id)


@dataclass
class ComponentCatalog:
    entries: tuple[SecurityComponentDescriptor, ...]
    security_env_image: VmImage
    clean_guest_images: dict[tuple[str, ...], VmImage] = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.component_id for c in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("component ids must be unique")
        self.entries = tuple(sorted(self.entries, key=lambda c: c.component_id))

    def check(self, publisher_pk: bytes, scheme=None) -> list[str]:
        """Ids of images failing integrity checks (empty when the catalog is sound)."""
        images = [self.security_env_image, *self.clean_guest_images.values()]
        return [img.image_id for img in images if not check_integrity(img, publisher_pk, scheme)]

    @property
    def env_config(self) -> SecurityEnvConfig:
        return parse_security_env(self.security_env_image.payload)

    def clean_image(self, app_manifest: Iterable[str]) -> VmImage:
        key = tuple(app_manifest)
        try:
            return self.clean_guest_images[key]
        except KeyError:
            raise UnknownManifest(f"no clean image for manifest {list(key)}") from None

    @property
    def clean_hashes(self) -> set[bytes]:
        return {img.content_hash for img in self.clean_guest_images.values()}

    def component(self, component_id: str) -> SecurityComponentDescriptor:
        for c in self.entries:
            if c.component_id == component_id:
                return c
        raise KeyError(component_id)

    # -- directory form ------------------------------------------------------

    def save(self, directory: Path | str) -> None:
        d = Path(directory)
        (d / "guests").mkdir(parents=True, exist_ok=True)
        lines = [
            "\t".join([c.component_id, str(c.version), ",".join(sorted(c.capabilities)),
                       str(c.cpu_cost), str(c.mem_cost), c.public_key.hex()])
            for c in self.entries
        ]
        (d / "components.tsv").write_text("".join(line + "\n" for line in lines))
        write_image_file(d / "security_env.vmimg", self.security_env_image)
        for img in self.clean_guest_images.values():
            write_image_file(d / "guests" / f"{img.image_id}.vmimg", img)

    @classmethod
    def load(cls, directory: Path | str) -> "ComponentCatalog":
        d = Path(directory)
        entries = []
        for lineno, line in enumerate((d / "components.tsv").read_text().splitlines(), 1):
            if not line.strip():
                continue
            f = line.split("\t")
            if len(f) != 6:
                raise ValueError(f"components.tsv line {lineno}: expected 6 fields")
            entries.append(SecurityComponentDescriptor(
                f[0], int(f[1]), frozenset(f[2].split(",")), int(f[3]), int(f[4]), bytes.fromhex(f[5])))
        guests = {}
        for path in sorted((d / "guests").glob("*.vmimg")):
            img = read_image_file(path)
            guests[img.app_manifest] = img
        return cls(tuple(entries), read_image_file(d / "security_env.vmimg"), guests)


# ---------------------------------------------------------------------------
# default fixtures
# ---------------------------------------------------------------------------

DEFAULT_MANIFESTS: tuple[tuple[str, ...], ...] = (("browser", "mail"), ("office",), ("terminal",))

# (id, version, capabilities, cpu, mem)
DEFAULT_COMPONENTS = (
    ("entropy-ids", 1, {Capability.ANOMALY_SCAN}, 3, 2),
    ("fw-basic", 1, {Capability.FIREWALL_FILTER}, 1, 1),
    ("sig-heavy", 2, {Capability.SIGNATURE_SCAN}, 4, 4),
    ("sig-lite", 1, {Capability.SIGNATURE_SCAN}, 2, 1),
    ("sig-pro", 1, {Capability.SIGNATURE_SCAN, Capability.FIREWALL_FILTER}, 3, 3),
    ("suite", 1, {Capability.SIGNATURE_SCAN, Capability.ANOMALY_SCAN, Capability.FIREWALL_FILTER}, 6, 5),
)

DEFAULT_PROFILES = {
    NodeClass.DESKTOP: (16, 16, {Capability.SIGNATURE_SCAN, Capability.FIREWALL_FILTER}),
    NodeClass.THIN_CLIENT: (4, 4, {Capability.SIGNATURE_SCAN}),
    NodeClass.MOBILE_HANDHELD: (2, 1, {Capability.SIGNATURE_SCAN}),
}


def default_profile(node_id: str, node_class: NodeClass = NodeClass.DESKTOP) -> NodeProfile:
    cpu, mem, caps = DEFAULT_PROFILES[NodeClass(node_class)]
    return NodeProfile(node_id, node_class, cpu, mem, frozenset(caps))


def default_ruleset(seed: int, count: int = 4) -> list[SignatureRule]:
    """Random 8-byte patterns whose bytes all have the high bit set, so they
    never occur by accident in the ASCII guest payloads."""
    rng = np.random.default_rng([seed, 0x5167])
    rules = []
    for i in range(count):
        pattern = bytes(rng.integers(0x80, 0x100, size=8, dtype=np.uint16).astype(np.uint8))
        rules.append(SignatureRule(f"W{i + 1}", pattern, f"synthetic worm family {i + 1}"))
    return rules


def guest_payload(image_id: str, app_manifest: Sequence[str], size: int = 2048) -> bytes:
    head = f"GUESTOS {image_id}\napps={','.join(app_manifest)}\n"
    body = []
    i = 0
    while len(head) + sum(map(len, body)) < size:
        app = app_manifest[i % len(app_manifest)] if app_manifest else "base"
        body.append(f"{app}: block {i:05d} ok\n")
        i += 1
    return (head + "".join(body)).encode()[:size]


def guest_image_id(app_manifest: Sequence[str]) -> str:
    return "guest-" + "-".join(app_manifest)


def default_catalog(
    pki: Pki,
    rules: Sequence[SignatureRule] | None = None,
    manifests: Sequence[Sequence[str]] = DEFAULT_MANIFESTS,
    anomaly_threshold: float = 7.5,
    components=DEFAULT_COMPONENTS,
    release: int = 1,
) -> ComponentCatalog:
    if rules is None:
        rules = default_ruleset(pki.seed)
    env = SecurityEnvConfig(tuple(rules), anomaly_threshold, release)
    env_image = make_image(f"secenv-r{release}", VmKind.SECURITY_ENV, security_env_payload(env),
                           pki.publisher, scheme=pki.scheme)
    entries = tuple(
        SecurityComponentDescriptor(cid, ver, frozenset(caps), cpu, mem,
                                    pki.keypair(component_owner(cid)).public_key)
        for cid, ver, caps, cpu, mem in components
    )
    guests = {}
    for manifest in manifests:
        manifest = tuple(manifest)
        iid = guest_image_id(manifest)
        guests[manifest] = make_image(iid, VmKind.GUEST_OS, guest_payload(iid, manifest), pki.publisher,
                                      manifest, scheme=pki.scheme)
    return ComponentCatalog(entries, env_image, guests)


def core_image(pki: Pki, image_id: str = "core-hv-1") -> VmImage:
    payload = f"CORE {image_id}\nkernel=desk-1.0\nhypervisor=sim-vmm\n".encode() * 8
    return make_image(image_id, VmKind.GUEST_OS, payload, pki.publisher, scheme=pki.scheme)
