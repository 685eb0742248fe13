"""A recording stand-in for the Docker daemon.

Default behaviour:

* ``POST /containers/create`` -> 201 ``{"Id": "<64 hex>", "Warnings": []}``
* ``POST /containers/{id}/start`` -> 204
* ``GET|HEAD /_ping`` -> 200 ``OK``
* ``POST /containers/{id}/attach`` with ``Upgrade`` -> 101, then echoes bytes
* anything else -> 404 ``{"message": "not found"}``

Every request is recorded with the exact bytes received, and every response
with the exact bytes sent. Routes can be overridden with :meth:`MockDaemon.script`.
"""
from __future__ import annotations

import asyncio
import json
import re
import secrets
import threading
from dataclasses import dataclass
from http import HTTPStatus
from typing import Callable

from ..docker_model import strip_version
from ..httpwire import MAX_HEAD, HttpError, HttpRequest, read_request
from .loop import BackgroundLoop

Responder = Callable[[HttpRequest], bytes]


@dataclass(frozen=True)
class RecordedRequest:
    raw: bytes
    method: str
    path: str
    query: str
    body: bytes
    connection: int

    @property
    def endpoint(self) -> str:
        return strip_version(self.path)


def build_response(
    status: int,
    body: bytes | str | dict | list = b"",
    headers: list[tuple[str, str]] | None = None,
    reason: str | None = None,
    chunked: bool = False,
    chunk_size: int = 7,
) -> bytes:
    if isinstance(body, (dict, list)):
        body = json.dumps(body).encode()
        headers = [("Content-Type", "application/json"), *(headers or [])]
    elif isinstance(body, str):
        body = body.encode()
    lines = [f"HTTP/1.1 {status} {reason or HTTPStatus(status).phrase}", "Api-Version: 1.41", "Server: Docker/mock"]
    lines += [f"{k}: {v}" for k, v in headers or []]
    no_body = status in (204, 304) or status < 200
    if chunked and not no_body:
        lines.append("Transfer-Encoding: chunked")
        framed = b"".join(
            b"%x\r\n%s\r\n" % (len(body[i : i + chunk_size]), body[i : i + chunk_size])
            for i in range(0, len(body), chunk_size)
        ) + b"0\r\n\r\n"
    else:
        if not no_body:
            lines.append(f"Content-Length: {len(body)}")
        framed = b"" if no_body else body
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + framed


_CREATE = re.compile(r"^/containers/create/?$")
_START = re.compile(r"^/containers/[^/]+/start/?$")
_ATTACH = re.compile(r"^/containers/[^/]+/attach/?$")


class MockDaemon:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, delay: float = 0.0) -> None:
        self.host = host
        self.port = port
        self.delay = delay
        self.recorded: list[RecordedRequest] = []
        self.sent: list[bytes] = []
        self.created_ids: list[str] = []
        self._scripts: list[tuple[str, re.Pattern[str], Responder]] = []
        self._lock = threading.Lock()
        self._conn_counter = 0
        self._bg: BackgroundLoop | None = None
        self._server: asyncio.AbstractServer | None = None

    # -- configuration -------------------------------------------------

    def script(self, method: str, pattern: str, responder: Responder | bytes) -> None:
        """Answer ``method`` requests whose unversioned path matches ``pattern``."""
        fn = responder if callable(responder) else (lambda _req, raw=responder: raw)
        self._scripts.insert(0, (method.upper(), re.compile(pattern), fn))

    def clear(self) -> None:
        with self._lock:
            self.recorded.clear()
            self.sent.clear()
            self.created_ids.clear()

    def requests_to(self, endpoint_pattern: str) -> list[RecordedRequest]:
        rx = re.compile(endpoint_pattern)
        with self._lock:
            return [r for r in self.recorded if rx.search(r.endpoint)]

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    @property
    def target(self) -> str:
        return f"{self.host}:{self.port}"

    # -- serving --------------------------------------------------------

    def _respond(self, req: HttpRequest) -> tuple[bytes, bool]:
        """Response bytes, and whether the connection becomes an echo tunnel."""
        endpoint = strip_version(req.path)
        for method, rx, fn in self._scripts:
            if method == req.method and rx.search(endpoint):
                return fn(req), False
        if req.method == "POST" and _CREATE.match(endpoint):
            cid = secrets.token_hex(32)
            with self._lock:
                self.created_ids.append(cid)
            return build_response(201, {"Id": cid, "Warnings": []}), False
        if req.method == "POST" and _START.match(endpoint):
            return build_response(204), False
        if req.method in ("GET", "HEAD") and endpoint == "/_ping":
            return build_response(200, "OK", [("Content-Type", "text/plain; charset=utf-8")]), False
        if req.method == "POST" and _ATTACH.match(endpoint) and "upgrade" in req.headers.tokens("connection"):
            head = build_response(101, headers=[("Connection", "Upgrade"), ("Upgrade", "tcp"),
                                                ("Content-Type", "application/vnd.docker.raw-stream")])
            return head, True
        return build_response(404, {"message": "not found"}), False

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        with self._lock:
            self._conn_counter += 1
            conn_id = self._conn_counter
        try:
            while True:
                try:
                    req = await read_request(reader)
                except HttpError:
                    writer.write(build_response(400, {"message": "bad request"}, [("Connection", "close")]))
                    await writer.drain()
                    return
                if req is None:
                    return
                with self._lock:
                    self.recorded.append(RecordedRequest(req.raw, req.method, req.path, req.query, req.body, conn_id))
                if self.delay:
                    await asyncio.sleep(self.delay)
                data, echo = self._respond(req)
                if req.method == "HEAD":
                    data = data.split(b"\r\n\r\n", 1)[0] + b"\r\n\r\n"
                with self._lock:
                    self.sent.append(data)
                writer.write(data)
                await writer.drain()
                if echo:
                    while chunk := await reader.read(65536):
                        writer.write(chunk)
                        await writer.drain()
                    return
                if not req.keep_alive:
                    return
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    async def start_async(self) -> None:
        self._server = await asyncio.start_server(self._handle, self.host, self.port, limit=MAX_HEAD)
        self.port = self._server.sockets[0].getsockname()[1]

    async def stop_async(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    def start(self) -> "MockDaemon":
        """Serve from a background thread; returns once the port is bound."""
        self._bg = BackgroundLoop("mock-daemon")
        try:
            self._bg.call(self.start_async)
        except Exception:
            self._bg.stop()
            self._bg = None
            raise
        return self

    def stop(self) -> None:
        if self._bg is not None:
            self._bg.call(self.stop_async)
            self._bg.stop()
            self._bg = None

    def __enter__(self) -> "MockDaemon":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def mock_daemon_serve(host: str = "127.0.0.1", port: int = 2375, delay: float = 0.0) -> None:
    """Serve in the foreground until interrupted."""

    async def _main() -> None:
        daemon = MockDaemon(host, port, delay)
        await daemon.start_async()
        print(f"mock daemon listening on {daemon.target}", flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await daemon.stop_async()

    try:
        asyncio.run(_main())
    except KeyboardInterrupt:
        pass
