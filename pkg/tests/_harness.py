"""Direct in-process wiring of one server and hand-built agents."""

from vmguard.agent import NodeAgent
from vmguard.catalog import core_image, default_profile
from vmguard.crypto import Pki, node_owner
from vmguard.errors import LinkDown
from vmguard.events import EventLog
from vmguard.evidence import EvidenceStore
from vmguard.model import LayerStack, VmInstance
from vmguard.server import SecurityServer


class DirectLink:
    """Calls the server synchronously; ``down`` makes every call fail."""

    def __init__(self, server: SecurityServer, node_id: str):
        self.server = server
        self.node_id = node_id
        self.down = False
        self.sent = []
        self.received = []

    def _check(self):
        if self.down:
            raise LinkDown("down")

    def request(self, msg, tick):
        self._check()
        self.sent.append(msg)
        reply = self.server.handle(msg, tick)
        self.received.append(reply)
        return reply

    def send(self, msg, tick):
        self._check()
        self.sent.append(msg)
        self.server.handle(msg, tick)

    def poll(self, tick):
        self._check()
        pushes = self.server.take_pushes(self.node_id, tick)
        self.received += pushes
        return pushes


def make_server(pki, catalog, root, **kw) -> SecurityServer:
    kw.setdefault("provisioning_delay", 1)
    return SecurityServer(catalog, EvidenceStore(root, pki.publisher.public_key), pki,
                          events=kw.pop("events", EventLog()), **kw)


def make_agent(pki, server, node_id="n1", *, profile=None, manifest=("office",), guests=1, key_pki=None,
               core=None, **kw) -> NodeAgent:
    keys, cert = (key_pki or pki).enroll(node_owner(node_id))
    image = server.catalog.clean_image(manifest)
    stack = LayerStack(f"hw-{node_id}", core or core_image(pki),
                       [VmInstance(f"{node_id}.g{i + 1}", image) for i in range(guests)])
    return NodeAgent(profile or default_profile(node_id), stack, keys, cert, DirectLink(server, node_id),
                     root_pk=pki.publisher.public_key, server_pk=pki.server.public_key,
                     events=server.events, **kw)


def rogue_pki(seed=1) -> Pki:
    return Pki(seed, namespace="rogue")
