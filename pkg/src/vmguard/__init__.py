"""Virtualization-based network security for desktop nodes.

A security server attests joining nodes, provisions each with a security VM
holding a resource-matched set of detection components, stores evidence of
infected guest VMs under a signed chain of custody, and hands back clean
replacements. The simulator drives the whole workflow deterministically.
"""

from .agent import NodeAgent
from .catalog import ComponentCatalog, default_catalog, select_components
from .crypto import AccessToken, Pki, Resource, check_access, hash_content, issue_token, sign, verify
from .detection import SignatureRule, Verdict, anomaly_scan, signature_scan
from .evidence import EvidenceBundle, EvidenceQuery, EvidenceStore, evidence_list, evidence_verify
from .model import (
    Capability,
    LayerStack,
    NodeClass,
    NodeProfile,
    SecurityComponentDescriptor,
    VmEvent,
    VmImage,
    VmInstance,
    VmKind,
    VmState,
    transition,
)
from .server import SecurityServer
from .simulator import Injection, Scenario, Simulation, load_scenario, run_scenario
from .wire import decode_frame, encode_frame

__version__ = "0.1.0"

__all__ = [
    "AccessToken",
    "Capability",
    "ComponentCatalog",
    "EvidenceBundle",
    "EvidenceQuery",
    "EvidenceStore",
    "Injection",
    "LayerStack",
    "NodeAgent",
    "NodeClass",
    "NodeProfile",
    "Pki",
    "Resource",
    "Scenario",
    "SecurityComponentDescriptor",
    "SecurityServer",
    "SignatureRule",
    "Simulation",
    "Verdict",
    "VmEvent",
    "VmImage",
    "VmInstance",
    "VmKind",
    "VmState",
    "anomaly_scan",
    "check_access",
    "decode_frame",
    "default_catalog",
    "encode_frame",
    "evidence_list",
    "evidence_verify",
    "hash_content",
    "issue_token",
    "load_scenario",
    "run_scenario",
    "select_components",
    "sign",
    "signature_scan",
    "transition",
    "verify",
]
