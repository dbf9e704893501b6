"""Security components consulted by the guard.

Two detectors, both pure functions of an observation: a byte-signature
scanner (antivirus analogue; also used on the network tap as a firewall
filter) and a Shannon-entropy anomaly detector (IDS analogue).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .crypto import Resource
from .model import Capability

MIN_PATTERN_LEN = 4


@dataclass(frozen=True)
class SignatureRule:
    rule_id: str
    pattern: bytes
    description: str = ""

    def __post_init__(self):
        if len(self.pattern) < MIN_PATTERN_LEN:
            raise ValueError(f"rule {self.rule_id}: pattern shorter than {MIN_PATTERN_LEN} bytes")
        if "\t" in self.rule_id or "\n" in self.rule_id or not self.rule_id:
            raise ValueError(f"bad rule id {self.rule_id!r}")


@dataclass(frozen=True)
class Observation:
    vm_id: str
    tick: int
    resource: Resource
    data: bytes


@dataclass(frozen=True)
class Verdict:
    infected: bool
    rule_id: str | None = None
    score: float | None = None

    @classmethod
    def clean(cls) -> "Verdict":
        return cls(False)

    @property
    def cause(self) -> str:
        if not self.infected:
            return ""
        if self.rule_id is not None:
            return f"rule:{self.rule_id}"
        return f"entropy:{self.score!r}"

    def __str__(self) -> str:
        return f"Infected({self.cause})" if self.infected else "Clean"


def check_ruleset(rules: Sequence[SignatureRule]) -> None:
    seen = set()
    for rule in rules:
        if rule.rule_id in seen:
            raise ValueError(f"duplicate rule id {rule.rule_id}")
        seen.add(rule.rule_id)


def signature_scan(observation: Observation, ruleset: Sequence[SignatureRule]) -> Verdict:
    """First rule (in ruleset order) whose pattern occurs anywhere in the data."""
    data = observation.data
    for rule in ruleset:
        if data.find(rule.pattern) >= 0:
            return Verdict(True, rule_id=rule.rule_id)
    return Verdict.clean()


def byte_entropy(data: bytes) -> float:
    """Shannon entropy of the byte histogram, in bits per byte."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log2(p)).sum()) + 0.0


def anomaly_scan(observation: Observation, threshold: float) -> Verdict:
    if not 0 < threshold <= 8:
        raise ValueError(f"threshold must lie in (0, 8], got {threshold}")
    score = byte_entropy(observation.data)
    if score > threshold:
        return Verdict(True, score=score)
    return Verdict.clean()


# ---------------------------------------------------------------------------
# ruleset files: rule_id<TAB>hex_pattern<TAB>description
# ---------------------------------------------------------------------------


def parse_ruleset(text: str) -> list[SignatureRule]:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise ValueError(f"ruleset line {lineno}: expected rule_id<TAB>hex_pattern<TAB>description")
        try:
            pattern = bytes.fromhex(fields[1])
        except ValueError as exc:
            raise ValueError(f"ruleset line {lineno}: {exc}") from None
        rules.append(SignatureRule(fields[0], pattern, "\t".join(fields[2:])))
    check_ruleset(rules)
    return rules


def format_ruleset(rules: Iterable[SignatureRule]) -> str:
    return "".join(f"{r.rule_id}\t{r.pattern.hex()}\t{r.description}\n" for r in rules)


def load_ruleset(path: Path | str) -> list[SignatureRule]:
    return parse_ruleset(Path(path).read_text())


def save_ruleset(path: Path | str, rules: Iterable[SignatureRule]) -> None:
    Path(path).write_text(format_ruleset(rules))


# ---------------------------------------------------------------------------
# security environment configuration, carried as the security image payload
# ---------------------------------------------------------------------------

SECENV_MAGIC = "SECENV1"


@dataclass(frozen=True)
class SecurityEnvConfig:
    rules: tuple[SignatureRule, ...]
    anomaly_threshold: float = 7.5
    release: int = 1


def security_env_payload(config: SecurityEnvConfig) -> bytes:
    head = f"{SECENV_MAGIC}\nrelease={config.release}\nanomaly_threshold={config.anomaly_threshold!r}\n"
    return (head + "[rules]\n" + format_ruleset(config.rules)).encode()


def parse_security_env(payload: bytes) -> SecurityEnvConfig:
    text = payload.decode()
    head, sep, rules_text = text.partition("[rules]\n")
    lines = head.splitlines()
    if not sep or not lines or lines[0] != SECENV_MAGIC:
        raise ValueError("not a security environment payload")
    settings = dict(line.split("=", 1) for line in lines[1:] if line)
    return SecurityEnvConfig(
        rules=tuple(parse_ruleset(rules_text)),
        anomaly_threshold=float(settings.get("anomaly_threshold", "7.5")),
        release=int(settings.get("release", "1")),
    )


# ---------------------------------------------------------------------------
# component runtime
# ---------------------------------------------------------------------------

CAPABILITY_RESOURCE: dict[str, Resource] = {
    Capability.SIGNATURE_SCAN: Resource.GUEST_DISK,
    Capability.ANOMALY_SCAN: Resource.GUEST_MEMORY,
    Capability.FIREWALL_FILTER: Resource.NETWORK_TAP,
}


def resources_for(capabilities: Iterable[str]) -> list[Resource]:
    """Resources a component needs tokens for; unknown tags need none."""
    return sorted({CAPABILITY_RESOURCE[c] for c in capabilities if c in CAPABILITY_RESOURCE}, key=lambda r: r.value)


def analyse(capability: str, observation: Observation, config: SecurityEnvConfig) -> Verdict:
    if capability == Capability.ANOMALY_SCAN:
        return anomaly_scan(observation, config.anomaly_threshold)
    if capability in (Capability.SIGNATURE_SCAN, Capability.FIREWALL_FILTER):
        return signature_scan(observation, config.rules)
    raise ValueError(f"no detector for capability {capability!r}")
