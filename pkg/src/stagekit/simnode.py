"""Simulated data-node fleet: deterministic content, throttling, faults.

Content for a path is a pseudo-random stream keyed by (content_seed, path):
4096-byte blocks of ``shake_256(f"{seed}:{path}:{block}")``. Terabyte-scale
identities collapse to a seed, and any harness can recompute the digest of
what a node will serve without storing payloads. The generator is pinned;
digests are stable across platforms.

Each GET is paced by its own token bucket (capacity one second of the
configured bandwidth, starting empty), so a single download runs at the
configured rate while concurrent downloads from one node scale throughput,
mirroring servers whose per-connection rate is the bottleneck.

Admin interface (same listener, never counted in transfer stats):
``GET /admin/inflight``, ``GET /admin/requests``, ``POST /admin/fault``,
``POST /admin/clock``, ``POST /admin/reset``.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import random
import sys
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterator
from urllib.parse import quote, unquote

from .clock import SYSTEM_CLOCK, Clock
from .credential import Credential, LocalTokenProvider
from .errors import StagingError
from .metrics import PROBE_PATH_PREFIX
from .transport import RELOCATION_HEADER, TOKEN_HEADER

CONTENT_BLOCK = 4096

FAULT_KINDS = (
    "wrong_published_checksum",
    "corrupt_first_n",
    "gone_after",
    "reject_all_tokens",
    "drop_connection",
)


class UnknownPath(StagingError):
    pass


def content_chunks(
    seed: int, path: str, size: int, chunk_size: int = 65536
) -> Iterator[bytes]:
    """Deterministic content stream for (seed, path), ``size`` bytes long."""
    emitted = 0
    block = 0
    buf = b""
    while emitted < size:
        while len(buf) < chunk_size and emitted + len(buf) < size:
            buf += hashlib.shake_256(f"{seed}:{path}:{block}".encode()).digest(
                CONTENT_BLOCK
            )
            block += 1
        take = min(chunk_size, size - emitted, len(buf))
        yield buf[:take]
        buf = buf[take:]
        emitted += take


def content_digest(seed: int, path: str, size: int, checksum_type: str = "md5") -> str:
    h = hashlib.new(checksum_type)
    for chunk in content_chunks(seed, path, size):
        h.update(chunk)
    return h.hexdigest()


def flip_first_nibble(hex_digest: str) -> str:
    """A deliberately wrong digest of the right shape."""
    return format(int(hex_digest[0], 16) ^ 0x8, "x") + hex_digest[1:]


@dataclass(frozen=True)
class FaultSpec:
    """One scripted misbehavior, scoped to paths matching ``match``.

    kinds: wrong_published_checksum; corrupt_first_n (first ``n`` GETs
    serve one flipped byte); gone_after (permanently gone ``after_s``
    seconds past node start, optionally advertising a relocation prefix);
    reject_all_tokens; drop_connection (each GET aborts mid-body with
    probability ``p``).
    """

    kind: str
    match: str = "*"
    n: int = 1
    after_s: float = 0.0
    relocation: str | None = None
    p: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.kind == "corrupt_first_n" and self.n < 1:
            raise ValueError("corrupt_first_n needs n >= 1")
        if not 0 <= self.p <= 1:
            raise ValueError("probability out of range")

    def matches(self, path: str) -> bool:
        return fnmatch.fnmatchcase(path, self.match)


@dataclass
class SimNodeConfig:
    node_id: str
    listen: tuple[str, int] = ("127.0.0.1", 0)
    bandwidth_bytes_per_sec: int | None = None  # None = unlimited
    latency_ms: int = 0
    content_seed: int = 0
    catalog: dict[str, int] = field(default_factory=dict)
    faults: list[FaultSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.bandwidth_bytes_per_sec is not None and self.bandwidth_bytes_per_sec <= 0:
            raise ValueError("bandwidth must be positive when limited")


class TokenBucket:
    """Paces one connection: capacity = one second of bandwidth, starts empty."""

    def __init__(self, rate: float) -> None:
        self.rate = rate
        self.capacity = rate
        self.tokens = 0.0
        self.last = time.monotonic()

    def acquire(self, n: int) -> None:
        while True:
            now = time.monotonic()
            self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
            self.last = now
            if self.tokens >= n:
                self.tokens -= n
                return
            time.sleep((n - self.tokens) / self.rate)


class _FleetMonitor:
    """Cross-node transfer accounting shared by every node in one fleet."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def enter(self) -> None:
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)

    def leave(self) -> None:
        with self._lock:
            self.current -= 1

    def reset(self) -> None:
        with self._lock:
            self.peak = self.current


class _QuietServer(ThreadingHTTPServer):
    """Clients that vanish mid-transfer are business as usual here."""

    def handle_error(self, request, client_address) -> None:
        exc = sys.exc_info()[1]
        if isinstance(exc, (BrokenPipeError, ConnectionResetError)):
            return
        super().handle_error(request, client_address)


class SimNode:
    """One data node: HTTP server over a deterministic content catalog."""

    def __init__(
        self,
        config: SimNodeConfig,
        clock: Clock = SYSTEM_CLOCK,
        monitor: _FleetMonitor | None = None,
    ) -> None:
        self.config = config
        self.clock = clock
        self.monitor = monitor
        self._faults: list[FaultSpec] = list(config.faults)
        self._rng = random.Random(config.content_seed ^ 0x5EED)
        self._lock = threading.Lock()
        self._started_at: float | None = None
        self.get_counts: dict[str, int] = {}
        self.auth_rejections = 0
        self.inflight = 0
        self.inflight_peak = 0
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        handler = _make_handler(self)
        self._server = _QuietServer(self.config.listen, handler)
        self._server.daemon_threads = True
        self._started_at = self.clock.now()
        self._thread = threading.Thread(
            target=self._server.serve_forever,
            kwargs={"poll_interval": 0.05},
            daemon=True,
            name=f"simnode-{self.config.node_id}",
        )
        self._thread.start()

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    @property
    def port(self) -> int:
        assert self._server is not None, "node not started"
        return self._server.server_address[1]

    @property
    def netloc(self) -> str:
        return f"{self.config.listen[0]}:{self.port}"

    @property
    def base_url(self) -> str:
        return f"http://{self.netloc}"

    def url_for(self, path: str) -> str:
        return f"{self.base_url}/{quote(path)}"

    # -- fault and counter bookkeeping --------------------------------------

    def add_fault(self, fault: FaultSpec) -> None:
        with self._lock:
            self._faults.append(fault)

    def fault_for(self, kind: str, path: str) -> FaultSpec | None:
        with self._lock:
            for f in self._faults:
                if f.kind == kind and f.matches(path):
                    return f
        return None

    def gone_state(self) -> FaultSpec | None:
        """The active gone_after fault once its switch-over time has passed."""
        with self._lock:
            faults = list(self._faults)
        assert self._started_at is not None
        for f in faults:
            if f.kind == "gone_after" and self.clock.now() - self._started_at >= f.after_s:
                return f
        return None

    def record_get(self, path: str) -> None:
        with self._lock:
            self.get_counts[path] = self.get_counts.get(path, 0) + 1

    def enter_transfer(self) -> None:
        with self._lock:
            self.inflight += 1
            self.inflight_peak = max(self.inflight_peak, self.inflight)
        if self.monitor:
            self.monitor.enter()

    def leave_transfer(self) -> None:
        with self._lock:
            self.inflight -= 1
        if self.monitor:
            self.monitor.leave()

    def reset_counters(self) -> None:
        with self._lock:
            self.get_counts.clear()
            self.auth_rejections = 0
            self.inflight_peak = self.inflight

    def drop_roll(self, p: float) -> bool:
        with self._lock:
            return self._rng.random() < p

    # -- content -----------------------------------------------------------

    def size_of(self, path: str) -> int:
        if path.startswith(PROBE_PATH_PREFIX):
            tail = path[len(PROBE_PATH_PREFIX) :]
            if tail.isdigit():
                return int(tail)
            raise UnknownPath(path)
        if path in self.config.catalog:
            return self.config.catalog[path]
        raise UnknownPath(path)

    def body_chunks(self, path: str, chunk_size: int) -> Iterator[bytes]:
        return content_chunks(
            self.config.content_seed, path, self.size_of(path), chunk_size
        )

    def published_checksum(self, path: str, checksum_type: str) -> str:
        digest = content_digest(
            self.config.content_seed, path, self.size_of(path), checksum_type
        )
        if self.fault_for("wrong_published_checksum", path):
            return flip_first_nibble(digest)
        return digest


def _token_valid(header: str | None, node: SimNode) -> bool:
    if not header:
        return False
    token_id, _, expiry = header.partition(":")
    if not token_id or not expiry:
        return False
    try:
        return float(expiry) > node.clock.now()
    except ValueError:
        return False


def _make_handler(node: SimNode):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args) -> None:
            pass

        # -- admin ---------------------------------------------------------

        def _admin(self) -> bool:
            if not self.path.startswith("/admin/"):
                return False
            verb = self.path[len("/admin/") :]
            if self.command == "GET" and verb == "inflight":
                self._send_json(
                    {"current": node.inflight, "peak": node.inflight_peak}
                )
            elif self.command == "GET" and verb == "requests":
                self._send_json(
                    {"gets": dict(node.get_counts), "auth_rejections": node.auth_rejections}
                )
            elif self.command == "POST" and verb == "fault":
                body = json.loads(self._read_body())
                node.add_fault(FaultSpec(**body))
                self._send_json({"ok": True})
            elif self.command == "POST" and verb == "clock":
                body = json.loads(self._read_body())
                advance = float(body["advance"])
                if hasattr(node.clock, "advance"):
                    node.clock.advance(advance)
                    self._send_json({"ok": True, "now": node.clock.now()})
                else:
                    self._send_json({"ok": False, "error": "clock not advanceable"}, 409)
            elif self.command == "POST" and verb == "reset":
                node.reset_counters()
                self._send_json({"ok": True})
            else:
                self._send_json({"error": "unknown admin verb"}, 404)
            return True

        def _read_body(self) -> bytes:
            length = int(self.headers.get("Content-Length", "0"))
            return self.rfile.read(length)

        def _send_json(self, obj: dict, status: int = 200) -> None:
            body = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(body)

        def _send_empty(self, status: int, headers: dict[str, str] | None = None) -> None:
            headers = dict(headers or {})
            headers.setdefault("Content-Length", "0")
            self.send_response(status)
            for k, v in headers.items():
                self.send_header(k, v)
            self.end_headers()

        # -- data protocol ---------------------------------------------------

        def _gone_check(self) -> bool:
            gone = node.gone_state()
            if gone is None:
                return False
            headers = {}
            if gone.relocation:
                headers[RELOCATION_HEADER] = gone.relocation
            self._send_empty(410, headers)
            return True

        def do_POST(self) -> None:
            if not self._admin():
                self._send_empty(405)

        def do_HEAD(self) -> None:
            if self._admin():
                return
            if self._gone_check():
                return
            path = unquote(self.path.lstrip("/"))
            try:
                size = node.size_of(path)
            except UnknownPath:
                self._send_empty(404)
                return
            self._send_empty(200, {"Content-Length": str(size)})

        def do_GET(self) -> None:
            if self._admin():
                return
            if self._gone_check():
                return
            path = unquote(self.path.lstrip("/"))

            reject = node.fault_for("reject_all_tokens", path)
            token_ok = _token_valid(self.headers.get(TOKEN_HEADER), node)
            if reject or not token_ok:
                node.auth_rejections += 1
                self._send_empty(401)
                return

            try:
                size = node.size_of(path)
            except UnknownPath:
                self._send_empty(404)
                return

            node.record_get(path)
            attempt = node.get_counts[path]
            node.enter_transfer()
            try:
                self._stream(path, size, attempt)
            finally:
                node.leave_transfer()

        def _stream(self, path: str, size: int, attempt: int) -> None:
            cfg = node.config
            if cfg.latency_ms:
                time.sleep(cfg.latency_ms / 1000.0)

            corrupt = node.fault_for("corrupt_first_n", path)
            do_corrupt = corrupt is not None and attempt <= corrupt.n and size > 0

            drop = node.fault_for("drop_connection", path)
            drop_at = None
            if drop is not None and node.drop_roll(drop.p):
                drop_at = size // 2

            rate = cfg.bandwidth_bytes_per_sec
            bucket = TokenBucket(rate) if rate else None
            chunk_size = 65536 if rate is None else max(1024, min(65536, rate // 10))

            self.send_response(200)
            self.send_header("Content-Length", str(size))
            self.end_headers()

            sent = 0
            first = True
            try:
                for chunk in node.body_chunks(path, chunk_size):
                    if do_corrupt and first:
                        chunk = bytes([chunk[0] ^ 0xFF]) + chunk[1:]
                        first = False
                    if drop_at is not None and sent + len(chunk) > drop_at:
                        # Abort mid-body: close the socket without finishing.
                        self.wfile.write(chunk[: max(0, drop_at - sent)])
                        self.wfile.flush()
                        self.connection.close()
                        self.close_connection = True
                        return
                    if bucket:
                        bucket.acquire(len(chunk))
                    self.wfile.write(chunk)
                    sent += len(chunk)
            except (BrokenPipeError, ConnectionResetError):
                # Client went away mid-transfer; nothing to clean up.
                self.close_connection = True

    return Handler


class SimFleet:
    """A set of simulated nodes sharing one clock and transfer monitor."""

    def __init__(self, configs: list[SimNodeConfig], clock: Clock = SYSTEM_CLOCK) -> None:
        ids = [c.node_id for c in configs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids in fleet")
        self.clock = clock
        self.monitor = _FleetMonitor()
        self.nodes: dict[str, SimNode] = {
            c.node_id: SimNode(c, clock=clock, monitor=self.monitor) for c in configs
        }

    def start(self) -> SimFleet:
        for n in self.nodes.values():
            n.start()
        return self

    def stop(self) -> None:
        for n in self.nodes.values():
            n.stop()

    def __enter__(self) -> SimFleet:
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def node(self, node_id: str) -> SimNode:
        return self.nodes[node_id]

    def base_urls(self) -> dict[str, str]:
        return {nid: n.base_url for nid, n in self.nodes.items()}

    def base_urls_by_netloc(self) -> dict[str, str]:
        """Keyed the way the scheduler and metrics identify nodes."""
        return {n.netloc: n.base_url for n in self.nodes.values()}

    def global_peak_inflight(self) -> int:
        return self.monitor.peak

    def reset_counters(self) -> None:
        self.monitor.reset()
        for n in self.nodes.values():
            n.reset_counters()

    def provider(self) -> LocalTokenProvider:
        """Token provider on the fleet clock; nodes accept what it issues."""
        return LocalTokenProvider(self.clock)

    def issue_credential(self, lifetime_s: int = 3600) -> Credential:
        return self.provider().issue(lifetime_s)

    def publish_manifest(
        self,
        node_id: str,
        paths: list[str] | None = None,
        checksum_type: str = "md5",
        dataset_id: str | None = None,
    ) -> str:
        """Canonical manifest for a node's catalog (or a subset of it).

        Checksums are the digests of what the node will actually serve,
        except paths carrying a wrong_published_checksum fault, which get
        a deliberately wrong digest.
        """
        node = self.nodes[node_id]
        catalog = node.config.catalog
        if paths is None:
            paths = list(catalog)
        lines = [f"dataset {dataset_id or node_id}"]
        for p in paths:
            if p not in catalog:
                raise UnknownPath(p)
            digest = node.published_checksum(p, checksum_type)
            lines.append(
                f"file '{p}' '{node.url_for(p)}' '{checksum_type}' '{digest}' {catalog[p]}"
            )
        return "\n".join(lines) + "\n"


def start_fleet(configs: list[SimNodeConfig], clock: Clock = SYSTEM_CLOCK) -> SimFleet:
    """Start every node; returns the running fleet handle."""
    return SimFleet(configs, clock=clock).start()


def parse_fault(text: str) -> FaultSpec:
    """Fault spec from its one-line form, e.g. ``corrupt_first_n 2 data/*``.

    Forms: ``wrong_published_checksum <glob>``; ``corrupt_first_n <n>
    <glob>``; ``gone_after <seconds> <glob> [relocation_url]``;
    ``reject_all_tokens <glob>``; ``drop_connection <p> <glob>``.
    """
    parts = text.split()
    if not parts:
        raise ValueError("empty fault spec")
    kind = parts[0]
    try:
        if kind in ("wrong_published_checksum", "reject_all_tokens"):
            return FaultSpec(kind=kind, match=parts[1])
        if kind == "corrupt_first_n":
            return FaultSpec(kind=kind, n=int(parts[1]), match=parts[2])
        if kind == "gone_after":
            relocation = parts[3] if len(parts) > 3 else None
            return FaultSpec(
                kind=kind, after_s=float(parts[1]), match=parts[2], relocation=relocation
            )
        if kind == "drop_connection":
            return FaultSpec(kind=kind, p=float(parts[1]), match=parts[2])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"bad fault spec {text!r}: {exc}") from exc
    raise ValueError(f"unknown fault kind {kind!r}")


def load_fleet_config(path) -> list[SimNodeConfig]:
    """Fleet config: one INI section per node, flat key = value inside.

    Recognized keys: listen (host:port), bandwidth_bytes_per_sec (integer
    or ``unlimited``), latency_ms, content_seed, catalog (comma-separated
    ``path:size`` pairs), and any number of ``fault*`` keys holding fault
    spec lines.
    """
    import configparser

    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)

    configs: list[SimNodeConfig] = []
    for section in parser.sections():
        sec = parser[section]
        host, _, port = sec.get("listen", "127.0.0.1:0").partition(":")
        bw_raw = sec.get("bandwidth_bytes_per_sec", "unlimited")
        bandwidth = None if bw_raw == "unlimited" else int(bw_raw)
        catalog: dict[str, int] = {}
        for item in sec.get("catalog", "").split(","):
            item = item.strip()
            if not item:
                continue
            p, _, size = item.rpartition(":")
            catalog[p] = int(size)
        faults = [
            parse_fault(value) for key, value in sec.items() if key.startswith("fault")
        ]
        configs.append(
            SimNodeConfig(
                node_id=section,
                listen=(host or "127.0.0.1", int(port or 0)),
                bandwidth_bytes_per_sec=bandwidth,
                latency_ms=int(sec.get("latency_ms", "0")),
                content_seed=int(sec.get("content_seed", "0")),
                catalog=catalog,
                faults=faults,
            )
        )
    return configs
