"""Admitting nodes: a clean desktop, a tampered core and a rogue key.

Run with ``python demos/01_admission.py``.
"""

# %%
import tempfile

from vmguard import NodeAgent, Pki, SecurityServer, VmInstance, default_catalog
from vmguard.catalog import core_image, default_profile
from vmguard.crypto import node_owner
from vmguard.events import EventLog
from vmguard.evidence import EvidenceStore
from vmguard.model import LayerStack, NodeClass


class Direct:
    """Hands messages straight to the server, no sockets involved."""

    def __init__(self, server):
        self.server = server

    def request(self, msg, tick):
        return self.server.handle(msg, tick)

    def send(self, msg, tick):
        self.server.handle(msg, tick)

    def poll(self, tick):
        return self.server.take_pushes(self.node, tick)


pki = Pki(seed=1)
catalog = default_catalog(pki)
store = EvidenceStore(tempfile.mkdtemp(), trust_root=pki.publisher.public_key)
events = EventLog()
server = SecurityServer(catalog, store, pki, events=events)


def node(node_id, node_class=NodeClass.DESKTOP, core=None, key_pki=pki):
    keys, cert = key_pki.enroll(node_owner(node_id))
    stack = LayerStack(f"hw-{node_id}", core or core_image(pki),
                       [VmInstance(f"{node_id}.g1", catalog.clean_image(("office",)))])
    link = Direct(server)
    link.node = node_id
    return NodeAgent(default_profile(node_id, node_class), stack, keys, cert, link,
                     root_pk=pki.publisher.public_key, server_pk=pki.server.public_key, events=events)


# %% a clean desktop gets a security VM and components fitted to its budget
desktop = node("n1")
print(desktop.boot_sequence(0))
print("components:", [c.component_id for c in desktop.components])
print("security VM:", desktop.stack.security_vm)

# %% a thin client has less to spend, so it gets a smaller set
thin = node("n2", NodeClass.THIN_CLIENT)
thin.boot_sequence(0)
print("thin client components:", [c.component_id for c in thin.components])

# %% a modified core never reaches the server: the node's own check refuses to boot
from vmguard.errors import IntegritySelfCheckFailed  # noqa: E402
from vmguard.model import VmImage  # noqa: E402

good = core_image(pki)
bad = VmImage(good.image_id, good.kind, good.payload + b"backdoor", good.content_hash, good.signature)
try:
    node("n3", core=bad).boot_sequence(0)
except IntegritySelfCheckFailed as exc:
    print("refused:", exc)

# %% a node whose key was certified by someone else is turned away
rogue = node("n4", key_pki=Pki(seed=1, namespace="rogue"))
print(rogue.boot_sequence(0))

# %% the server's side of the story
for e in events.events:
    if e.actor == "server" and e.kind in ("provision", "attest", "grant", "deny"):
        print(e.line())
