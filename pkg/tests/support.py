"""Helpers shared by the integration and acceptance tests."""
from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from secdocker.audit import AuditSink
from secdocker.config import ProfileStore
from secdocker.plugins import PluginRegistry
from secdocker.policy import SecurityProfile
from secdocker.proxy import FirewallProxy, ProxySettings
from secdocker.testkit.loop import BackgroundLoop


class RunningProxy:
    """A FirewallProxy served from a background event loop."""

    def __init__(self, upstream: tuple[str, int], store: ProfileStore | SecurityProfile | None = None,
                 plugins: PluginRegistry | None = None, audit: AuditSink | None = None, **settings) -> None:
        if store is None:
            store = SecurityProfile()
        if isinstance(store, SecurityProfile):
            store = ProfileStore.from_profile(store)
        self.settings = ProxySettings(
            listen_host="127.0.0.1", listen_port=settings.pop("listen_port", 0),
            upstream_host=upstream[0], upstream_port=upstream[1], **settings,
        )
        self.store = store
        self.proxy = FirewallProxy(self.settings, store, plugins, audit)
        self._bg = BackgroundLoop("test-proxy")

    def start(self) -> "RunningProxy":
        self._bg.call(self.proxy.start)
        return self

    def stop(self) -> None:
        try:
            self._bg.call(lambda: self.proxy.shutdown(timeout=2))
        finally:
            self._bg.stop()

    @property
    def address(self) -> tuple[str, int]:
        return self.proxy.address

    def __enter__(self) -> "RunningProxy":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


def send_and_close(address: tuple[str, int], data: bytes, timeout: float = 5.0) -> bytes:
    """Write ``data``, half-close, and return everything read until EOF."""
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(data)
        sock.shutdown(socket.SHUT_WR)
        chunks = []
        while chunk := sock.recv(65536):
            chunks.append(chunk)
    return b"".join(chunks)


def http_request(method: str, path: str, body: bytes | dict | None = None,
                 headers: list[tuple[str, str]] | None = None, host: str = "localhost") -> bytes:
    if isinstance(body, dict):
        body = json.dumps(body).encode()
        headers = [("Content-Type", "application/json"), *(headers or [])]
    lines = [f"{method} {path} HTTP/1.1", f"Host: {host}", *(f"{k}: {v}" for k, v in headers or [])]
    if body is not None:
        lines.append(f"Content-Length: {len(body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode() + (body or b"")


def split_response(raw: bytes) -> tuple[int, dict[str, str], bytes]:
    head, _, body = raw.partition(b"\r\n\r\n")
    lines = head.decode("latin-1").split("\r\n")
    status = int(lines[0].split(" ")[1])
    headers = {}
    for line in lines[1:]:
        key, _, value = line.partition(":")
        headers[key.strip().lower()] = value.strip()
    return status, headers, body


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def wait_for_port(port: int, timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.5).close()
            return
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


@contextmanager
def cli_process(*args: str, port: int, stdout=subprocess.DEVNULL):
    """Run ``python -m secdocker.cli ...`` until the block exits."""
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    proc = subprocess.Popen([sys.executable, "-m", "secdocker.cli", *args], stdout=stdout,
                            stderr=subprocess.PIPE, env=env)
    try:
        try:
            wait_for_port(port)
        except OSError:
            proc.kill()
            _, err = proc.communicate(timeout=5)
            raise RuntimeError(f"{args[0]} did not start: {err.decode(errors='replace')}") from None
        yield proc
    finally:
        if proc.poll() is None:
            proc.terminate()
            try:
                proc.wait(timeout=15)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        if proc.stderr:
            proc.stderr.close()


def write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
