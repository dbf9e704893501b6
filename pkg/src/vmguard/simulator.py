"""Deterministic discrete-event testbed: one server, N node agents, an
in-memory transport, infection injection and worm propagation.

Within a tick the order is fixed: scheduled injections, scheduled component
updates, propagation, each agent's step (lease work, queued transfers, guard
cycle), then delivery of due server pushes. All randomness comes from one
generator seeded by the scenario.
"""

from __future__ import annotations

import configparser
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import BootResult, NodeAgent
from .catalog import DEFAULT_MANIFESTS, core_image, default_catalog, default_profile, default_ruleset
from .crypto import Pki, hex_digest, node_owner
from .detection import SignatureRule, load_ruleset
from .errors import (
    InfeasibleProfile,
    IntegritySelfCheckFailed,
    LinkDown,
    ScenarioInvalid,
    TargetNotRunning,
    UnadmittedNode,
)
from .events import EventLog
from .evidence import EvidenceStore
from .model import LayerStack, NodeClass, NodeProfile, VmImage, VmInstance
from .server import SecurityServer
from .wire import Message, canonical_bytes

log = logging.getLogger(__name__)

TOPOLOGIES = ("complete", "ring", "star")


@dataclass(frozen=True)
class Injection:
    tick: int
    node_id: str
    pattern_id: str
    vm_id: str | None = None


@dataclass(frozen=True)
class ScheduledUpdate:
    tick: int
    node_id: str
    component_ids: tuple[str, ...]


@dataclass(frozen=True)
class NodeSpec:
    profile: NodeProfile
    manifest: tuple[str, ...] = DEFAULT_MANIFESTS[0]
    tamper_core: bool = False
    rogue_key: bool = False
    compromised: bool = False  # skips its own integrity self-check


@dataclass
class Scenario:
    seed: int = 0
    num_nodes: int = 1
    nodes: dict[str, NodeSpec] = field(default_factory=dict)
    ruleset: list[SignatureRule] | None = None
    injections: list[Injection] = field(default_factory=list)
    propagation_probability: float = 0.0
    detector_latency: int = 0
    provisioning_delay: int = 1
    max_ticks: int = 20
    topology: str = "complete"
    guests_per_node: int = 1
    lease_ticks: int = 600
    window: int | None = None
    server_outages: list[tuple[int, int]] = field(default_factory=list)
    updates: list[ScheduledUpdate] = field(default_factory=list)

    @property
    def node_ids(self) -> list[str]:
        return [f"n{i + 1}" for i in range(self.num_nodes)]

    def rules(self) -> list[SignatureRule]:
        return list(self.ruleset) if self.ruleset is not None else default_ruleset(self.seed)

    def node_spec(self, node_id: str) -> NodeSpec:
        if node_id in self.nodes:
            return self.nodes[node_id]
        idx = self.node_ids.index(node_id)
        return NodeSpec(default_profile(node_id), DEFAULT_MANIFESTS[idx % len(DEFAULT_MANIFESTS)])

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise ScenarioInvalid("num_nodes", "must be at least 1")
        if not 0.0 <= self.propagation_probability <= 1.0:
            raise ScenarioInvalid("propagation_probability", f"{self.propagation_probability} not in [0, 1]")
        for name in ("detector_latency", "provisioning_delay", "max_ticks", "guests_per_node", "lease_ticks"):
            if getattr(self, name) < 0:
                raise ScenarioInvalid(name, "must be non-negative")
        if self.guests_per_node < 1:
            raise ScenarioInvalid("guests_per_node", "must be at least 1")
        if self.topology not in TOPOLOGIES:
            raise ScenarioInvalid("topology", f"{self.topology!r} not one of {TOPOLOGIES}")
        ids = set(self.node_ids)
        unknown = set(self.nodes) - ids
        if unknown:
            raise ScenarioInvalid("nodes", f"unknown node ids {sorted(unknown)}")
        for node_id, node in self.nodes.items():
            if node.profile.node_id != node_id:
                raise ScenarioInvalid("nodes", f"profile id {node.profile.node_id} under {node_id}")
        rule_ids = {r.rule_id for r in self.rules()}
        for inj in self.injections:
            if inj.node_id not in ids:
                raise ScenarioInvalid("injections", f"unknown node {inj.node_id}")
            if inj.pattern_id not in rule_ids:
                raise ScenarioInvalid("injections", f"unknown pattern {inj.pattern_id}")
            if inj.tick < 1:
                raise ScenarioInvalid("injections", "injection ticks start at 1")
        for upd in self.updates:
            if upd.node_id not in ids:
                raise ScenarioInvalid("updates", f"unknown node {upd.node_id}")
        for start, end in self.server_outages:
            if end < start:
                raise ScenarioInvalid("server_outages", f"{start}-{end} is empty")


@dataclass
class Metrics:
    downtimes: list[int] = field(default_factory=list)
    detection_latencies: list[int] = field(default_factory=list)
    propagation_count: int = 0
    evidence_count: int = 0
    incidents: int = 0
    open_incidents: int = 0
    infections: int = 0
    infected_at_first_halt: int = 0
    admitted_nodes: int = 0
    denied_nodes: int = 0

    def to_text(self) -> str:
        out = []
        for key, value in self.__dict__.items():
            if isinstance(value, list):
                value = ",".join(map(str, value))
            out.append(f"{key}={value}\n")
        return "".join(out)


class SimLink:
    """In-memory transport for one node. Outage windows make it raise LinkDown."""

    def __init__(self, sim: "Simulation", node_id: str):
        self.sim = sim
        self.node_id = node_id

    def _check(self, tick: int) -> None:
        if self.sim.server_down(tick):
            raise LinkDown("server unreachable")

    def request(self, msg: Message, tick: int) -> Message:
        self._check(tick)
        return self.sim.server.handle(msg, tick)

    def send(self, msg: Message, tick: int) -> None:
        self._check(tick)
        self.sim.server.handle(msg, tick)

    def poll(self, tick: int) -> list[Message]:
        self._check(tick)
        pushes = self.sim.server.take_pushes(self.node_id, tick)
        for msg in pushes:
            self.sim.trace.emit(tick, "server", "push", hex_digest(canonical_bytes(msg)),
                                type=msg.type_name, to=self.node_id, seq=msg.seq)
        return pushes


@dataclass
class InfectionState:
    tick: int
    pattern_id: str
    source: str  # "inject" or the infecting vm id


class Simulation:
    def __init__(self, scenario: Scenario, evidence_root: Path | str | None = None):
        scenario.validate()
        self.scenario = scenario
        self.trace = EventLog()
        self.rng = np.random.default_rng(scenario.seed)
        self.pki = Pki(scenario.seed)
        self.rules = scenario.rules()
        self.patterns = {r.rule_id: r.pattern for r in self.rules}
        manifests = sorted({scenario.node_spec(n).manifest for n in scenario.node_ids} | set(DEFAULT_MANIFESTS))
        self.catalog = default_catalog(self.pki, self.rules, manifests)

        self._tmp = None
        if evidence_root is None:
            self._tmp = tempfile.mkdtemp(prefix="vmguard-evidence-")
            evidence_root = self._tmp
        self.store = EvidenceStore(evidence_root, trust_root=self.pki.publisher.public_key)
        self.server = SecurityServer(self.catalog, self.store, self.pki, lease_ticks=scenario.lease_ticks,
                                     provisioning_delay=scenario.provisioning_delay, events=self.trace)
        self.agents: dict[str, NodeAgent] = {}
        for node_id in scenario.node_ids:
            self.agents[node_id] = self._make_agent(node_id)
        self.boot: dict[str, BootResult] = {}
        self.infected: dict[str, InfectionState] = {}
        self.now = 0

    def _make_agent(self, node_id: str) -> NodeAgent:
        node = self.scenario.node_spec(node_id)
        pki = Pki(self.scenario.seed, namespace="rogue") if node.rogue_key else self.pki
        keys, cert = pki.enroll(node_owner(node_id))
        core = core_image(self.pki)
        if node.tamper_core:
            core = VmImage(core.image_id, core.kind, core.payload[:-1] + b"!", core.content_hash, core.signature)
        guest = self.catalog.clean_image(node.manifest)
        guests = [VmInstance(f"{node_id}.g{i + 1}", guest) for i in range(self.scenario.guests_per_node)]
        stack = LayerStack(f"hw-{node_id}", core, guests)
        return NodeAgent(
            node.profile, stack, keys, cert, SimLink(self, node_id),
            root_pk=self.pki.publisher.public_key, server_pk=self.pki.server.public_key,
            exposure_latency=self.scenario.detector_latency, window=self.scenario.window,
            self_check=not node.compromised, events=self.trace,
        )

    def server_down(self, tick: int) -> bool:
        return any(start <= tick <= end for start, end in self.scenario.server_outages)

    # -- scenario actions ------------------------------------------------------

    def inject_infection(self, node_id: str, pattern_id: str, tick: int, vm_id: str | None = None) -> str:
        agent = self.agents[node_id]
        if not agent.admitted:
            raise UnadmittedNode(f"{node_id} is not admitted")
        if vm_id is None:
            running = agent.running_guests()
            if not running:
                raise TargetNotRunning(f"{node_id} has no running guest")
            vm = running[0]
        else:
            vm = agent.stack.guest(vm_id)
        vm.append(self.patterns[pattern_id], tick)
        self.infected.setdefault(vm.vm_id, InfectionState(tick, pattern_id, "inject"))  # earliest infection wins
        self.trace.emit(tick, "sim", "inject", vm.payload_hash.hex(), node=node_id, vm=vm.vm_id, pattern=pattern_id)
        return vm.vm_id

    def neighbours(self, index: int) -> list[int]:
        n = self.scenario.num_nodes
        topo = self.scenario.topology
        if topo == "complete":
            return [j for j in range(n) if j != index]
        if topo == "ring":
            return [(index + 1) % n] if n > 1 else []
        return [j for j in range(1, n)] if index == 0 else [0]

    def propagate(self, tick: int) -> None:
        p = self.scenario.propagation_probability
        agents = list(self.agents.values())
        sources = [
            (i, vm)
            for i, agent in enumerate(agents)
            for vm in agent.running_guests()
            if vm.vm_id in self.infected and self.infected[vm.vm_id].tick < tick
        ]
        for i, src in sources:
            pattern_id = self.infected[src.vm_id].pattern_id
            for j in self.neighbours(i):
                for target in agents[j].running_guests():
                    if target.vm_id in self.infected:
                        continue
                    if self.rng.random() < p:
                        target.append(self.patterns[pattern_id], tick)
                        self.infected[target.vm_id] = InfectionState(tick, pattern_id, src.vm_id)
                        self.trace.emit(tick, "sim", "propagate", target.payload_hash.hex(),
                                        source=src.vm_id, target=target.vm_id, pattern=pattern_id)

    # -- main loop -------------------------------------------------------------

    def admit_all(self) -> None:
        for node_id, agent in self.agents.items():
            try:
                self.boot[node_id] = agent.boot_sequence(0)
            except IntegritySelfCheckFailed:
                self.boot[node_id] = BootResult(False, "IntegritySelfCheckFailed")
            except LinkDown:
                agent.status = "unadmitted"
                self.boot[node_id] = BootResult(False, "Unreachable")

    def step(self, tick: int) -> None:
        self.now = tick
        for inj in self.scenario.injections:
            if inj.tick == tick:
                try:
                    self.inject_infection(inj.node_id, inj.pattern_id, tick, inj.vm_id)
                except (TargetNotRunning, UnadmittedNode) as exc:
                    self.trace.emit(tick, "sim", "inject_refused", node=inj.node_id, reason=type(exc).__name__)
        for upd in self.scenario.updates:
            if upd.tick == tick:
                try:
                    comps = [self.catalog.component(c) for c in upd.component_ids]
                    self.server.push_component_update(upd.node_id, comps, tick)
                except (UnadmittedNode, InfeasibleProfile, KeyError) as exc:
                    self.trace.emit(tick, "sim", "update_refused", node=upd.node_id, reason=type(exc).__name__)
        self.propagate(tick)
        for agent in self.agents.values():
            agent.step(tick)
        for agent in self.agents.values():
            agent.deliver(tick)

    def run(self) -> tuple[EventLog, Metrics]:
        self.admit_all()
        for tick in range(1, self.scenario.max_ticks + 1):
            self.step(tick)
        return self.trace, self.metrics()

    def metrics(self) -> Metrics:
        m = Metrics()
        incidents = sorted(
            (inc for agent in self.agents.values() for inc in agent.incidents.values()),
            key=lambda inc: (inc.halt_tick, inc.vm_id),
        )
        m.incidents = len(incidents)
        m.downtimes = [inc.downtime for inc in incidents if inc.downtime is not None]
        m.open_incidents = sum(1 for inc in incidents if inc.replace_tick is None)
        m.detection_latencies = [
            inc.halt_tick - self.infected[inc.vm_id].tick for inc in incidents if inc.vm_id in self.infected
        ]
        m.propagation_count = len(self.trace.of_kind("propagate"))
        m.evidence_count = len(self.store)
        m.infections = len(self.infected)
        if incidents:
            first = incidents[0].halt_tick
            m.infected_at_first_halt = sum(1 for s in self.infected.values() if s.tick <= first)
        m.admitted_nodes = sum(1 for r in self.boot.values() if r.admitted)
        m.denied_nodes = len(self.boot) - m.admitted_nodes
        return m

    def vm(self, vm_id: str) -> VmInstance:
        for agent in self.agents.values():
            for vm in agent.stack.guest_vms:
                if vm.vm_id == vm_id:
                    return vm
        raise KeyError(vm_id)

    def close(self) -> None:
        if self._tmp is not None:
            shutil.rmtree(self._tmp, ignore_errors=True)
            self._tmp = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_scenario(scenario: Scenario, evidence_root: Path | str | None = None) -> tuple[EventLog, Metrics]:
    with Simulation(scenario, evidence_root) as sim:
        return sim.run()


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _lines(value: str) -> list[list[str]]:
    return [line.split() for line in value.splitlines() if line.strip() and not line.strip().startswith("#")]


def load_scenario(path: Path | str) -> Scenario:
    """Read an INI-style scenario file (see scenarios/README.md for the schema)."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ScenarioInvalid("file", str(exc)) from None
    if "scenario" not in cp:
        raise ScenarioInvalid("scenario", "missing [scenario] section")
    s = cp["scenario"]

    def get(name, conv, default):
        if name not in s:
            return default
        try:
            return conv(s[name])
        except ValueError as exc:
            raise ScenarioInvalid(name, str(exc)) from None

    sc = Scenario(
        seed=get("seed", int, 0),
        num_nodes=get("num_nodes", int, 1),
        propagation_probability=get("propagation_probability", float, 0.0),
        detector_latency=get("detector_latency", int, 0),
        provisioning_delay=get("provisioning_delay", int, 1),
        max_ticks=get("max_ticks", int, 20),
        topology=get("topology", str.strip, "complete"),
        guests_per_node=get("guests_per_node", int, 1),
        lease_ticks=get("lease_ticks", int, 600),
        window=get("window", lambda v: int(v) if v.strip() else None, None),
    )
    if "ruleset" in s and s["ruleset"].strip():
        try:
            sc.ruleset = load_ruleset(path.parent / s["ruleset"].strip())
        except (OSError, ValueError) as exc:
            raise ScenarioInvalid("ruleset", str(exc)) from None
    try:
        for start_end in filter(None, (x.strip() for x in s.get("server_outages", "").split(","))):
            a, _, b = start_end.partition("-")
            sc.server_outages.append((int(a), int(b or a)))
        for fields in _lines(cp.get("injections", "list", fallback="")):
            tick, node_id, pattern = fields[:3]
            sc.injections.append(Injection(int(tick), node_id, pattern, fields[3] if len(fields) > 3 else None))
        for fields in _lines(cp.get("updates", "list", fallback="")):
            sc.updates.append(ScheduledUpdate(int(fields[0]), fields[1], tuple(fields[2].split(","))))
    except (ValueError, IndexError) as exc:
        raise ScenarioInvalid("schedule", str(exc)) from None

    for section in cp.sections():
        if not section.startswith("node "):
            continue
        node_id = section.split(None, 1)[1].strip()
        n = cp[section]
        try:
            base = default_profile(node_id, NodeClass(n.get("node_class", "Desktop")))
            caps = n.get("required_capabilities")
            profile = NodeProfile(
                node_id, base.node_class,
                int(n.get("cpu_budget", base.cpu_budget)),
                int(n.get("mem_budget", base.mem_budget)),
                frozenset(c.strip() for c in caps.split(",") if c.strip()) if caps is not None
                else base.required_capabilities,
            )
            idx = sc.node_ids.index(node_id) if node_id in sc.node_ids else 0
            manifest = n.get("manifest")
            sc.nodes[node_id] = NodeSpec(
                profile,
                tuple(manifest.split(",")) if manifest else DEFAULT_MANIFESTS[idx % len(DEFAULT_MANIFESTS)],
                tamper_core=_bool(n.get("tamper_core", "false")),
                rogue_key=_bool(n.get("rogue_key", "false")),
                compromised=_bool(n.get("compromised", "false")),
            )
        except ValueError as exc:
            raise ScenarioInvalid(section, str(exc)) from None
    sc.validate()
    return sc
