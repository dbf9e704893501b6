"""Socket transport for running the server and agents as separate processes.

The same ``SecurityServer`` and ``NodeAgent`` used by the simulator are wired
to TCP streams of length-prefixed frames. Time is a wall clock cut into ticks.
Server pushes go out right after the reply to whatever the node sent, and on
an idle connection every ``push_interval`` seconds.
"""

from __future__ import annotations

import logging
import select
import socket
import socketserver
import threading
import time
from pathlib import Path
from typing import Callable

from .agent import BootResult, NodeAgent
from .catalog import ComponentCatalog, core_image, default_catalog
from .crypto import Pki, node_owner
from .errors import FrameError, LinkDown, TargetNotRunning
from .events import EventLog
from .evidence import EvidenceStore, read_trust_root
from .model import LayerStack, NodeProfile, VmInstance, read_image_file, write_image_file
from .server import SecurityServer
from .wire import MAX_FRAME, CleanVmDelivery, ComponentUpdate, FrameDecoder, Message, encode_frame

log = logging.getLogger(__name__)

PUSH_TYPES = (CleanVmDelivery, ComponentUpdate)


class WallClock:
    """Current tick = seconds since the epoch divided by ``tick_seconds``.
    Never goes backwards within one process."""

    def __init__(self, tick_seconds: float = 1.0):
        if tick_seconds <= 0:
            raise ValueError("tick_seconds must be positive")
        self.tick_seconds = tick_seconds
        self._last = 0
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            self._last = max(self._last, int(time.time() / self.tick_seconds))
            return self._last

    def sleep_until(self, tick: int) -> None:
        delay = tick * self.tick_seconds - time.time()
        if delay > 0:
            time.sleep(delay)


def parse_address(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = default_host, text
    try:
        return host or default_host, int(port)
    except ValueError:
        raise ValueError(f"bad address {text!r}; expected host:port") from None


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------


class _SessionHandler(socketserver.BaseRequestHandler):
    server: "_TcpServer"

    def handle(self) -> None:
        core: SecurityServer = self.server.core
        clock = self.server.clock
        sock: socket.socket = self.request
        decoder = FrameDecoder(self.server.max_frame)
        node_id: str | None = None
        peer = self.client_address
        log.info("session open %s", peer)
        try:
            while not self.server.closing:
                ready, _, _ = select.select([sock], [], [], self.server.push_interval)
                if not ready:
                    if node_id is not None:
                        self._push(sock, node_id)
                    continue
                chunk = sock.recv(65536)
                if not chunk:
                    break
                try:
                    messages = decoder.feed(chunk)
                except FrameError as exc:
                    log.warning("dropping session %s: %s", peer, exc)
                    break
                for msg in messages:
                    node_id = msg.sender
                    with core._lock:
                        reply = core.handle(msg, clock())
                        out = [reply] if reply is not None else []
                        out += core.take_pushes(node_id, clock())
                    for m in out:
                        sock.sendall(encode_frame(m))
        except OSError as exc:
            log.info("session %s ended: %s", peer, exc)
        log.info("session closed %s", peer)

    def _push(self, sock: socket.socket, node_id: str) -> None:
        core = self.server.core
        with core._lock:
            out = core.take_pushes(node_id, self.server.clock())
        for m in out:
            sock.sendall(encode_frame(m))


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, core: SecurityServer, clock: WallClock, push_interval: float, max_frame: int):
        self.core = core
        self.clock = clock
        self.push_interval = push_interval
        self.max_frame = max_frame
        self.closing = False
        super().__init__(address, _SessionHandler)


class LiveServer:
    """A ``SecurityServer`` listening on TCP. Use as a context manager or call
    ``start``/``stop``; ``serve_forever`` blocks the calling thread."""

    def __init__(self, core: SecurityServer, address: tuple[str, int], clock: WallClock | None = None,
                 push_interval: float = 0.2, max_frame: int = MAX_FRAME):
        self.core = core
        self.clock = clock or WallClock()
        self._tcp = _TcpServer(address, core, self.clock, push_interval, max_frame)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def serve_forever(self) -> None:
        log.info("listening on %s:%d", *self.address)
        self._tcp.serve_forever(poll_interval=0.2)

    def start(self) -> "LiveServer":
        self._thread = threading.Thread(target=self.serve_forever, name="vmguard-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._tcp.closing = True
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def open_server(catalog_dir: Path | str, evidence_dir: Path | str, seed: int, *,
                lease_ticks: int = 600, events: EventLog | None = None) -> SecurityServer:
    """Build a server from a catalog directory (written from the seeded defaults
    when it holds no catalog yet) and an evidence directory."""
    pki = Pki(seed)
    catalog_dir = Path(catalog_dir)
    if not (catalog_dir / "components.tsv").exists():
        log.info("writing default catalog to %s", catalog_dir)
        default_catalog(pki).save(catalog_dir)
    catalog = ComponentCatalog.load(catalog_dir)
    store = EvidenceStore(evidence_dir, trust_root=pki.publisher.public_key)
    if read_trust_root(evidence_dir) != pki.publisher.public_key:
        raise ValueError(f"evidence store {evidence_dir} belongs to a different trust root")
    # deliveries leave as soon as the node is next reachable
    return SecurityServer(catalog, store, pki, lease_ticks=lease_ticks, provisioning_delay=0,
                          events=events or EventLog(keep=False))


# ---------------------------------------------------------------------------
# agent side
# ---------------------------------------------------------------------------


class SocketLink:
    """Client end of one node session. Connection failures surface as
    ``LinkDown``; the next call reconnects."""

    def __init__(self, address: tuple[str, int], timeout: float = 5.0, max_frame: int = MAX_FRAME):
        self.address = address
        self.timeout = timeout
        self.max_frame = max_frame
        self._sock: socket.socket | None = None
        self._decoder = FrameDecoder(max_frame)
        self._pushes: list[Message] = []
        self._replies: list[Message] = []

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise LinkDown(f"cannot reach {self.address[0]}:{self.address[1]}: {exc}") from None
            self._decoder = FrameDecoder(self.max_frame)
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _fail(self, why: str) -> LinkDown:
        self.close()
        return LinkDown(why)

    def _write(self, msg: Message) -> None:
        sock = self._connect()
        try:
            sock.sendall(encode_frame(msg, self.max_frame))
        except OSError as exc:
            raise self._fail(f"send failed: {exc}") from None

    def _read(self, wait: float) -> None:
        """Read whatever arrives within ``wait`` seconds and sort it into
        pushes and replies."""
        sock = self._connect()
        deadline = time.monotonic() + wait
        while True:
            remaining = max(0.0, deadline - time.monotonic())
            try:
                ready, _, _ = select.select([sock], [], [], remaining)
            except (OSError, ValueError) as exc:
                raise self._fail(f"select failed: {exc}") from None
            if not ready:
                return
            try:
                chunk = sock.recv(65536)
            except OSError as exc:
                raise self._fail(f"recv failed: {exc}") from None
            if not chunk:
                raise self._fail("server closed the connection")
            try:
                messages = self._decoder.feed(chunk)
            except FrameError as exc:
                raise self._fail(f"bad frame from server: {exc}") from None
            for m in messages:
                (self._pushes if isinstance(m, PUSH_TYPES) else self._replies).append(m)
            if self._replies or remaining == 0:
                return

    def request(self, msg: Message, tick: int) -> Message:
        self._replies.clear()
        self._write(msg)
        deadline = time.monotonic() + self.timeout
        while not self._replies:
            left = deadline - time.monotonic()
            if left <= 0:
                raise self._fail(f"no reply to {msg.type_name} within {self.timeout}s")
            self._read(left)
        reply = self._replies.pop(0)
        if self._replies:
            log.warning("discarding %d unexpected replies", len(self._replies))
            self._replies.clear()
        return reply

    def send(self, msg: Message, tick: int) -> None:
        self._write(msg)

    def poll(self, tick: int, wait: float = 0.05) -> list[Message]:
        if self._sock is not None:
            self._read(wait)
        out, self._pushes = self._pushes, []
        if self._replies:
            log.warning("discarding %d unsolicited replies", len(self._replies))
            self._replies.clear()
        return out


def load_profile(path: Path | str) -> NodeProfile:
    """Parse a key=value node profile file."""
    fields: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path} line {lineno}: expected key=value")
        fields[key.strip()] = value.strip()
    missing = {"node_id", "node_class", "cpu_budget", "mem_budget", "required_capabilities"} - set(fields)
    if missing:
        raise ValueError(f"{path}: missing {sorted(missing)}")
    caps = frozenset(c.strip() for c in fields["required_capabilities"].split(",") if c.strip())
    return NodeProfile(fields["node_id"], fields["node_class"], int(fields["cpu_budget"]),
                       int(fields["mem_budget"]), caps)


def load_stack(directory: Path | str, node_id: str, pki: Pki) -> LayerStack:
    """Read ``core.vmimg`` and ``guests/*.vmimg`` from a stack directory,
    writing the seeded defaults first when the directory holds no core image."""
    d = Path(directory)
    if not (d / "core.vmimg").exists():
        log.info("writing default stack to %s", d)
        (d / "guests").mkdir(parents=True, exist_ok=True)
        write_image_file(d / "core.vmimg", core_image(pki))
        guest = next(iter(default_catalog(pki).clean_guest_images.values()))
        write_image_file(d / "guests" / f"{guest.image_id}.vmimg", guest)
    guests = [
        VmInstance(f"{node_id}.g{i + 1}", read_image_file(p))
        for i, p in enumerate(sorted((d / "guests").glob("*.vmimg")))
    ]
    return LayerStack(f"hw-{node_id}", read_image_file(d / "core.vmimg"), guests)


def make_live_agent(profile: NodeProfile, stack: LayerStack, seed: int, link, *,
                    events: EventLog | None = None, **kwargs) -> NodeAgent:
    """Agent whose node key is enrolled under the seeded trust root."""
    pki = Pki(seed)
    keys, cert = pki.enroll(node_owner(profile.node_id))
    return NodeAgent(profile, stack, keys, cert, link, root_pk=pki.publisher.public_key,
                     server_pk=pki.server.public_key, scheme=pki.scheme,
                     events=events or EventLog(keep=False), **kwargs)


def boot_with_retry(agent: NodeAgent, clock: Callable[[], int], attempts: int = 10,
                    delay: float = 0.5) -> BootResult:
    for attempt in range(attempts):
        try:
            return agent.boot_sequence(clock())
        except LinkDown as exc:
            log.info("boot attempt %d: %s", attempt + 1, exc)
            time.sleep(delay)
    return BootResult(False, "Unreachable")


def run_agent(agent: NodeAgent, clock: WallClock, cycles: int,
              injections: dict[int, bytes] | None = None,
              stop: threading.Event | None = None) -> None:
    """Drive ``cycles`` guard cycles, one per tick. ``injections`` maps a cycle
    number (1-based) to bytes appended to the first running guest."""
    injections = injections or {}
    tick = clock()
    for cycle in range(1, cycles + 1):
        if stop is not None and stop.is_set():
            return
        clock.sleep_until(tick + 1)
        tick = clock()
        if cycle in injections:
            try:
                vm = agent.running_guests()[0]
                vm.append(injections[cycle], tick)
                log.info("injected %d bytes into %s at tick %d", len(injections[cycle]), vm.vm_id, tick)
            except (IndexError, TargetNotRunning):
                log.warning("cycle %d: no running guest to infect", cycle)
        agent.step(tick)
        agent.deliver(tick)


__all__ = [
    "LiveServer",
    "SocketLink",
    "WallClock",
    "boot_with_retry",
    "load_profile",
    "load_stack",
    "make_live_agent",
    "open_server",
    "parse_address",
    "run_agent",
]
