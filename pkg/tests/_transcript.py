"""Builds the example session recorded in docs/transcript.md.

Run ``python tests/_transcript.py`` from the repository root to rewrite the
document after an intentional wire-format change.
"""

import re
import sys
import tempfile
from pathlib import Path

from vmguard.agent import build_join_request
from vmguard.catalog import core_image, default_catalog, default_profile, default_ruleset
from vmguard.crypto import Pki, node_owner, sign
from vmguard.detection import Verdict
from vmguard.events import EventLog
from vmguard.evidence import EvidenceStore
from vmguard.model import LayerStack, NodeClass
from vmguard.server import SecurityServer
from vmguard.wire import AttestationReport, InfectionReport, encode_frame, report_message

SEED = 7
DOC = Path(__file__).resolve().parent.parent / "docs" / "transcript.md"


def session() -> list[tuple[str, object]]:
    """(direction, message) pairs for a ThinClient joining, being admitted and
    reporting an infection, plus a rogue node being turned away."""
    pki = Pki(SEED)
    with tempfile.TemporaryDirectory() as tmp:
        server = SecurityServer(default_catalog(pki, default_ruleset(SEED)), EvidenceStore(tmp, pki.publisher.public_key),
                                pki, lease_ticks=100, events=EventLog(keep=False))
        profile = default_profile("n1", NodeClass.THIN_CLIENT)
        keys, cert = pki.enroll(node_owner("n1"))
        stack = LayerStack("hw-n1", core_image(pki), [])
        out = []

        def exchange(msg, tick):
            out.append(("node->server", msg))
            reply = server.handle(msg, tick)
            out.append(("server->node", reply))
            return reply

        join = build_join_request(profile, stack, keys, cert, pki.scheme).stamped(1, "n1")
        provision = exchange(join, 0)
        measured = provision.security_image.content_hash
        report = AttestationReport(node_id="n1", security_vm_hash=measured,
                                   signature=sign(keys.private_key, report_message("n1", measured)))
        exchange(report.stamped(2, "n1"), 0)
        exchange(InfectionReport(node_id="n1", vm_id="n1.g1", verdict=Verdict(True, "W1"), halt_tick=7)
                 .stamped(3, "n1"), 7)

        rogue = Pki(SEED, namespace="rogue")
        rkeys, rcert = rogue.enroll(node_owner("n9"))
        rjoin = build_join_request(default_profile("n9"), LayerStack("hw-n9", core_image(pki), []), rkeys, rcert)
        exchange(rjoin.stamped(1, "n9"), 8)
        return out


def _wrap(hexstr: str, width: int = 64) -> str:
    return "\n".join(hexstr[i:i + width] for i in range(0, len(hexstr), width))


def render() -> str:
    parts = [
        "# Example wire transcript\n\n",
        "A node `n1` (ThinClient profile, seed 7) joins, is provisioned and admitted, then reports an\n",
        "infected guest. A node `n9` whose key was certified by a different root is then refused.\n",
        "Every frame is a 4-byte big-endian body length followed by the canonical JSON body.\n",
        "The hex blocks are exact frame bytes; `tests/test_wire.py` re-encodes the same session and\n",
        "compares byte for byte.\n\n",
    ]
    for i, (direction, msg) in enumerate(session(), 1):
        frame = encode_frame(msg)
        parts.append(f"## Frame {i}: {direction} {msg.type_name} (seq {msg.seq}, {len(frame) - 4} body bytes)\n\n")
        parts.append("```hex\n" + _wrap(frame.hex()) + "\n```\n\n")
        parts.append("Body:\n\n```json\n" + frame[4:].decode("ascii") + "\n```\n\n")
    return "".join(parts)


def frames_from_doc(text: str) -> list[bytes]:
    return [bytes.fromhex(block.replace("\n", "")) for block in re.findall(r"```hex\n(.*?)\n```", text, re.S)]


if __name__ == "__main__":
    DOC.parent.mkdir(exist_ok=True)
    DOC.write_text(render())
    sys.stdout.write(f"wrote {DOC}\n")
