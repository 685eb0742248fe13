"""The intercepting proxy: accept clients, police creates, relay everything else.

A client connection borrows an upstream connection only when it first has
something to forward, so a denied request never puts a byte on the wire to the
daemon. Idle keep-alive upstream connections are pooled and reused.
"""
from __future__ import annotations

import asyncio
import enum
import logging
import signal
import time
from collections import Counter
from dataclasses import dataclass

from .audit import AuditIOError, AuditRecord, AuditSink
from .config import ProfileStore
from .docker_model import EndpointClass, ParseError, classify_endpoint, parse_create_request, render_create_body
from .httpwire import (
    MAX_HEAD,
    HttpError,
    HttpErrorKind,
    HttpRequest,
    RelayResult,
    craft_denial_response,
    json_response,
    read_request,
    relay_response,
    rewrite_request,
)
from .plugins import PluginRegistry, run_pre_admission
from .policy import Verdict, evaluate

log = logging.getLogger(__name__)

DEFAULT_PORT = 8999
UPSTREAM_POOL_SIZE = 32


class ProxyBindError(OSError):
    pass


class UpstreamError(ConnectionError):
    pass


def parse_address(text: str, default_port: int | None = None) -> tuple[str, int]:
    """``"host:port"``, ``":port"`` or ``"[v6]:port"`` -> (host, port)."""
    text = text.strip()
    if text.startswith("tcp://"):
        text = text[len("tcp://"):]
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port_text = rest.lstrip(":")
    else:
        host, sep, port_text = text.rpartition(":")
        if not sep:
            host, port_text = text, ""
    if not port_text:
        if default_port is None:
            raise ValueError(f"address {text!r} has no port")
        port_text = str(default_port)
    port = int(port_text)
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range in {text!r}")
    return host or "0.0.0.0", port


@dataclass(frozen=True)
class ProxySettings:
    listen_host: str = "0.0.0.0"
    listen_port: int = DEFAULT_PORT
    upstream_host: str = "127.0.0.1"
    upstream_port: int = 2375
    connection_idle_timeout: float = 120.0
    max_connections: int = 1024
    connect_timeout: float = 5.0
    drain_timeout: float = 10.0

    def __post_init__(self) -> None:
        if (self.listen_host, self.listen_port) == (self.upstream_host, self.upstream_port):
            raise ValueError("listen and upstream addresses must differ")
        if self.connection_idle_timeout <= 0 or self.connect_timeout <= 0 or self.drain_timeout <= 0:
            raise ValueError("timeouts must be positive")
        if self.max_connections < 1:
            raise ValueError("max_connections must be at least 1")

    @classmethod
    def from_addresses(cls, listen: str, upstream: str, **kwargs) -> "ProxySettings":
        lh, lp = parse_address(listen, DEFAULT_PORT)
        uh, up = parse_address(upstream)
        return cls(listen_host=lh, listen_port=lp, upstream_host=uh, upstream_port=up, **kwargs)


class ExchangeOutcome(enum.Enum):
    FORWARDED = "forwarded"
    FORWARDED_MUTATED = "forwarded-mutated"
    DENIED = "denied"
    RELAYED_RAW = "relayed-raw"
    # Answered by the proxy itself: unparsable create, upstream down.
    REJECTED = "rejected"


async def _pipe(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
    try:
        while True:
            data = await reader.read(65536)
            if not data:
                break
            writer.write(data)
            await writer.drain()
        if writer.can_write_eof():
            writer.write_eof()
    except (ConnectionError, OSError):
        pass


class _Connection:
    def __init__(self, proxy: "FirewallProxy", reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.proxy = proxy
        self.reader = reader
        self.writer = writer
        peer = writer.get_extra_info("peername")
        self.peer = f"{peer[0]}:{peer[1]}" if isinstance(peer, tuple) else str(peer)
        self.upstream: tuple[asyncio.StreamReader, asyncio.StreamWriter] | None = None
        # Upstream is between responses and may be handed to another client.
        self.upstream_idle = False
        self.busy = False
        self.expired = False

    def expire(self) -> None:
        self.expired = True
        self.writer.transport.abort()

    async def _connect(self) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]:
        pooled = self.proxy._take_pooled()
        if pooled is not None:
            return pooled
        s = self.proxy.settings
        try:
            return await asyncio.wait_for(
                asyncio.open_connection(s.upstream_host, s.upstream_port, limit=MAX_HEAD),
                s.connect_timeout,
            )
        except (OSError, asyncio.TimeoutError) as exc:
            raise UpstreamError(f"cannot reach daemon at {s.upstream_host}:{s.upstream_port}: {exc or 'timeout'}") from None

    def _drop_upstream(self) -> None:
        if self.upstream is not None:
            self.upstream[1].close()
            self.upstream = None
        self.upstream_idle = False

    async def forward(self, method: str, data: bytes) -> RelayResult:
        """Send ``data`` upstream and relay the response to the client."""
        for attempt in (0, 1):
            reused = self.upstream is not None or self.proxy.has_pooled
            if self.upstream is None:
                self.upstream = await self._connect()
            up_reader, up_writer = self.upstream
            self.upstream_idle = False
            try:
                up_writer.write(data)
                await up_writer.drain()
                result = await relay_response(up_reader, self.writer, method)
                self.upstream_idle = result.keep_alive and not result.tunnel
                return result
            except HttpError as exc:
                self._drop_upstream()
                # A reused keep-alive connection the daemon had already closed.
                if reused and attempt == 0 and exc.kind is HttpErrorKind.TRUNCATED and "before response" in exc.detail:
                    continue
                raise UpstreamError(f"bad response from daemon: {exc}") from None
            except (ConnectionError, OSError) as exc:
                self._drop_upstream()
                if reused and attempt == 0:
                    continue
                raise UpstreamError(f"daemon connection failed: {exc}") from None
        raise AssertionError("unreachable")

    async def respond(self, response) -> float:
        self.writer.write(response.to_bytes())
        stamp = time.perf_counter()
        await self.writer.drain()
        return stamp

    async def tunnel(self) -> None:
        assert self.upstream is not None
        up_reader, up_writer = self.upstream
        await asyncio.gather(_pipe(self.reader, up_writer), _pipe(up_reader, self.writer))

    def close(self) -> None:
        if self.upstream is not None and self.upstream_idle:
            self.proxy._release(self.upstream)
            self.upstream = None
        self._drop_upstream()
        self.writer.close()


class FirewallProxy:
    def __init__(
        self,
        settings: ProxySettings,
        store: ProfileStore,
        plugins: PluginRegistry | None = None,
        audit: AuditSink | None = None,
    ) -> None:
        self.settings = settings
        self.store = store
        self.plugins = plugins or PluginRegistry()
        self.audit = audit
        self.outcomes: Counter[ExchangeOutcome] = Counter()
        self._server: asyncio.AbstractServer | None = None
        self._slots = asyncio.Semaphore(settings.max_connections)
        self._connections: dict[asyncio.Task, _Connection] = {}
        self._pool: list[tuple[asyncio.StreamReader, asyncio.StreamWriter]] = []
        self._closing = False

    @property
    def has_pooled(self) -> bool:
        return bool(self._pool)

    def _take_pooled(self) -> tuple[asyncio.StreamReader, asyncio.StreamWriter] | None:
        while self._pool:
            reader, writer = self._pool.pop()
            if reader.at_eof() or writer.is_closing():
                writer.close()
                continue
            return reader, writer
        return None

    def _release(self, pair: tuple[asyncio.StreamReader, asyncio.StreamWriter]) -> None:
        reader, writer = pair
        if self._closing or len(self._pool) >= UPSTREAM_POOL_SIZE or reader.at_eof() or writer.is_closing():
            writer.close()
        else:
            self._pool.append(pair)

    @property
    def address(self) -> tuple[str, int]:
        assert self._server is not None
        host, port = self._server.sockets[0].getsockname()[:2]
        return host, port

    async def start(self) -> None:
        s = self.settings
        try:
            self._server = await asyncio.start_server(self._on_client, s.listen_host, s.listen_port, limit=MAX_HEAD)
        except OSError as exc:
            raise ProxyBindError(exc.errno, f"cannot listen on {s.listen_host}:{s.listen_port}: {exc.strerror}") from None
        log.info("listening on %s:%d, upstream %s:%d", *self.address, s.upstream_host, s.upstream_port)

    async def probe_upstream(self) -> bool:
        s = self.settings
        try:
            _, writer = await asyncio.wait_for(asyncio.open_connection(s.upstream_host, s.upstream_port), s.connect_timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            log.warning("daemon at %s:%d not reachable yet: %s", s.upstream_host, s.upstream_port, exc or "timeout")
            self._event("warning", "upstream unreachable at startup", upstream=f"{s.upstream_host}:{s.upstream_port}")
            return False
        writer.close()
        return True

    async def shutdown(self, timeout: float | None = None) -> None:
        """Stop accepting, let in-flight exchanges finish, then cut the rest."""
        timeout = self.settings.drain_timeout if timeout is None else timeout
        self._closing = True
        if self._server is not None:
            self._server.close()
        for task, conn in list(self._connections.items()):
            if not conn.busy:
                task.cancel()
        pending = list(self._connections)
        if pending:
            _, still = await asyncio.wait(pending, timeout=timeout)
            for task in still:
                task.cancel()
            if still:
                await asyncio.wait(still, timeout=1)
        for _, writer in self._pool:
            writer.close()
        self._pool.clear()
        if self._server is not None:
            await self._server.wait_closed()

    async def _on_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        conn = _Connection(self, reader, writer)
        async with self._slots:
            assert task is not None
            self._connections[task] = conn
            try:
                await self.handle_connection(conn)
            except asyncio.CancelledError:
                pass
            except Exception:
                log.exception("connection %s failed", conn.peer)
            finally:
                self._connections.pop(task, None)
                conn.close()

    async def handle_connection(self, conn: _Connection) -> None:
        loop = asyncio.get_running_loop()
        while not self._closing:
            conn.busy = False
            timer = loop.call_later(self.settings.connection_idle_timeout, conn.expire)
            try:
                req = await read_request(conn.reader)
            except HttpError as exc:
                conn.busy = True
                if not conn.expired:
                    await self._reject_unreadable(conn, exc)
                return
            except (ConnectionError, OSError):
                return
            finally:
                timer.cancel()
            if req is None:
                return
            conn.busy = True
            if classify_endpoint(req.method, req.path) is EndpointClass.CREATE_CONTAINER:
                outcome, keep = await self._intercept(conn, req)
            else:
                outcome, keep = await self._passthrough(conn, req)
            self.outcomes[outcome] += 1
            if outcome is ExchangeOutcome.RELAYED_RAW:
                await conn.tunnel()
                return
            if not keep or not req.keep_alive:
                return

    async def _reject_unreadable(self, conn: _Connection, exc: HttpError) -> None:
        intercepted = exc.method is not None and classify_endpoint(exc.method, exc.target or "") is EndpointClass.CREATE_CONTAINER
        if intercepted:
            self._record(conn, exc.method, exc.target or "", "error", reasons=(f"unreadable request: {exc}",))
        if exc.kind is HttpErrorKind.TRUNCATED:
            return
        status = 413 if exc.kind is HttpErrorKind.TOO_LARGE else 400
        try:
            await conn.respond(json_response(status, f"SecDocker: {exc}"))
        except (ConnectionError, OSError):
            pass

    async def _passthrough(self, conn: _Connection, req: HttpRequest) -> tuple[ExchangeOutcome, bool]:
        log.debug("%s %s %s (passthrough)", conn.peer, req.method, req.target)
        try:
            result = await conn.forward(req.method, req.raw)
        except UpstreamError as exc:
            self._event("error", "upstream failure", client_address=conn.peer, path=req.target, detail=str(exc))
            return await self._bad_gateway(conn, exc), False
        if result.tunnel:
            return ExchangeOutcome.RELAYED_RAW, False
        return ExchangeOutcome.FORWARDED, result.keep_alive

    async def _bad_gateway(self, conn: _Connection, exc: Exception) -> ExchangeOutcome:
        try:
            await conn.respond(json_response(502, f"SecDocker: upstream unavailable: {exc}"))
        except (ConnectionError, OSError):
            pass
        return ExchangeOutcome.REJECTED

    async def _intercept(self, conn: _Connection, req: HttpRequest) -> tuple[ExchangeOutcome, bool]:
        try:
            spec = parse_create_request(req.body, req.query)
        except ParseError as exc:
            stamp = await conn.respond(json_response(400, f"SecDocker: cannot inspect create request: {exc}"))
            self._record(conn, req.method, req.target, "error", reasons=(str(exc),), latency=stamp - req.started)
            return ExchangeOutcome.REJECTED, True

        verdicts: tuple[dict, ...] = ()
        if len(self.plugins):
            aggregate = await asyncio.to_thread(run_pre_admission, self.plugins, spec)
            verdicts = tuple(v.to_dict() for v in aggregate.verdicts)
            if not aggregate.passed:
                reasons = tuple(f"plugin {v.plugin_name}: {v.reason}" for v in aggregate.verdicts if not v.passed)
                stamp = await conn.respond(json_response(403, f"SecDocker: image rejected by {aggregate.reason}"))
                self._record(
                    conn, req.method, req.target, "denied", spec.image, reasons, verdicts, stamp - req.started
                )
                return ExchangeOutcome.DENIED, True

        decision = evaluate(self.store.current, spec)
        if decision.denied:
            stamp = await conn.respond(craft_denial_response(decision.violations))
            reasons = tuple(str(v) for v in decision.violations)
            self._record(conn, req.method, req.target, "denied", spec.image, reasons, verdicts, stamp - req.started)
            log.info("denied create of %s from %s: %s", spec.image, conn.peer, ", ".join(reasons))
            return ExchangeOutcome.DENIED, True

        if decision.verdict is Verdict.ALLOW_WITH_MUTATIONS:
            data = rewrite_request(req, render_create_body(decision.spec))
            outcome, label = ExchangeOutcome.FORWARDED_MUTATED, "mutated"
            reasons = tuple(str(m) for m in decision.mutations)
        else:
            data = req.raw
            outcome, label = ExchangeOutcome.FORWARDED, "allowed"
            reasons = ()

        try:
            result = await conn.forward(req.method, data)
        except UpstreamError as exc:
            outcome = await self._bad_gateway(conn, exc)
            self._record(
                conn, req.method, req.target, "error", spec.image, (str(exc),), verdicts,
                time.perf_counter() - req.started,
            )
            return outcome, False
        self._record(conn, req.method, req.target, label, spec.image, reasons, verdicts, result.first_byte_at - req.started)
        if result.tunnel:
            return ExchangeOutcome.RELAYED_RAW, False
        return outcome, result.keep_alive

    def _record(
        self,
        conn: _Connection,
        method: str,
        path: str,
        decision: str,
        image: str | None = None,
        reasons: tuple[str, ...] = (),
        verdicts: tuple[dict, ...] = (),
        latency: float = 0.0,
    ) -> None:
        if self.audit is None:
            return
        rec = AuditRecord(
            client_address=conn.peer,
            method=method,
            path=path,
            decision=decision,
            image=image,
            reasons=reasons,
            plugin_verdicts=verdicts,
            latency_micros=max(0, int(latency * 1_000_000)),
        )
        try:
            self.audit.record(rec)
        except AuditIOError as exc:
            log.error("audit logging degraded: %s", exc)

    def _event(self, level: str, message: str, **details) -> None:
        if self.audit is None:
            return
        try:
            self.audit.event(level, message, **details)
        except AuditIOError as exc:
            log.error("audit logging degraded: %s", exc)


async def handle_connection(
    reader: asyncio.StreamReader,
    writer: asyncio.StreamWriter,
    settings: ProxySettings,
    store: ProfileStore,
    plugins: PluginRegistry | None = None,
    audit: AuditSink | None = None,
) -> None:
    """Serve one already-accepted client connection to completion."""
    proxy = FirewallProxy(settings, store, plugins, audit)
    conn = _Connection(proxy, reader, writer)
    try:
        await proxy.handle_connection(conn)
    finally:
        conn.close()


async def serve(
    settings: ProxySettings,
    store: ProfileStore,
    plugins: PluginRegistry | None = None,
    audit: AuditSink | None = None,
    stop: asyncio.Event | None = None,
) -> None:
    proxy = FirewallProxy(settings, store, plugins, audit)
    await proxy.probe_upstream()
    await proxy.start()
    stop = stop or asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError, ValueError):
            pass
    try:
        await stop.wait()
    finally:
        log.info("shutting down; draining for up to %.0fs", settings.drain_timeout)
        await proxy.shutdown()


def run_proxy(
    settings: ProxySettings,
    store: ProfileStore,
    plugins: PluginRegistry | None = None,
    audit: AuditSink | None = None,
) -> None:
    """Run until SIGINT/SIGTERM. Raises :class:`ProxyBindError` if the port is taken."""
    asyncio.run(serve(settings, store, plugins, audit))
