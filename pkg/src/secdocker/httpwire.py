"""HTTP/1.1 message framing over asyncio streams.

The parsers keep the exact bytes they consumed next to the decoded message so
that pass-through traffic can be relayed verbatim. Responses from the daemon
are relayed incrementally (chunk by chunk) instead of being buffered, because
endpoints such as ``/events`` or ``logs?follow=1`` never finish.
"""
from __future__ import annotations

import asyncio
import enum
import json
import re
import time
from dataclasses import dataclass, field
from http import HTTPStatus
from typing import AsyncIterator, Iterable, Sequence

MAX_BODY = 16 * 1024 * 1024
MAX_HEAD = 64 * 1024
_RELAY_BLOCK = 64 * 1024

_TOKEN = re.compile(rb"^[!#$%&'*+\-.^_`|~0-9A-Za-z]+$")
_VERSION = re.compile(rb"^HTTP/(\d)\.(\d)$")
_STATUS_LINE = re.compile(rb"^(HTTP/\d\.\d) (\d{3})(?: (.*))?$")


class HttpErrorKind(enum.Enum):
    MALFORMED = "malformed"
    TOO_LARGE = "too-large"
    TRUNCATED = "truncated"


class HttpError(Exception):
    def __init__(self, kind: HttpErrorKind, detail: str, method: str | None = None, target: str | None = None) -> None:
        super().__init__(f"{kind.value}: {detail}")
        self.kind = kind
        self.detail = detail
        # Known when the failure happened after the request line was read.
        self.method = method
        self.target = target


def _malformed(detail: str) -> HttpError:
    return HttpError(HttpErrorKind.MALFORMED, detail)


class Headers:
    """Ordered multimap with case-insensitive lookup."""

    def __init__(self, items: Iterable[tuple[str, str]] = ()) -> None:
        self._items = list(items)

    def get(self, name: str, default: str | None = None) -> str | None:
        name = name.lower()
        for key, value in self._items:
            if key.lower() == name:
                return value
        return default

    def get_all(self, name: str) -> list[str]:
        name = name.lower()
        return [value for key, value in self._items if key.lower() == name]

    def tokens(self, name: str) -> list[str]:
        """Comma-separated list values across all occurrences, lowercased."""
        return [t.strip().lower() for value in self.get_all(name) for t in value.split(",") if t.strip()]

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and self.get(name) is not None

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Headers) and self._items == other._items

    def __repr__(self) -> str:
        return f"Headers({self._items!r})"


@dataclass
class HttpRequest:
    method: str
    path: str
    query: str
    version: str
    headers: Headers
    body: bytes = b""
    # Everything consumed from the wire for this message, framing included.
    raw: bytes = field(default=b"", compare=False, repr=False)
    request_line: bytes = field(default=b"", compare=False, repr=False)
    header_lines: list[bytes] = field(default_factory=list, compare=False, repr=False)
    # perf_counter() when the request line arrived.
    started: float = field(default=0.0, compare=False, repr=False)

    @property
    def target(self) -> str:
        return f"{self.path}?{self.query}" if self.query else self.path

    @property
    def keep_alive(self) -> bool:
        return _keep_alive(self.version, self.headers)


@dataclass
class HttpResponse:
    status: int
    reason: str
    headers: Headers
    body: bytes = b""
    version: str = "HTTP/1.1"
    raw: bytes = field(default=b"", compare=False, repr=False)

    def to_bytes(self) -> bytes:
        lines = [f"{self.version} {self.status} {self.reason}"]
        lines += [f"{name}: {value}" for name, value in self.headers]
        return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + self.body

    def json(self):
        return json.loads(self.body)


def _keep_alive(version: str, headers: Headers) -> bool:
    tokens = headers.tokens("connection")
    if "close" in tokens:
        return False
    return version == "HTTP/1.1" or "keep-alive" in tokens


async def _readline(reader: asyncio.StreamReader) -> bytes:
    try:
        return await reader.readline()
    except (asyncio.LimitOverrunError, ValueError):
        raise HttpError(HttpErrorKind.TOO_LARGE, "line too long") from None


def _strip_eol(line: bytes) -> bytes:
    if line.endswith(b"\r\n"):
        return line[:-2]
    return line[:-1]


async def _read_head(reader: asyncio.StreamReader) -> tuple[bytes, bytes, list[bytes], float] | None:
    """Start line and header lines; None on a clean close before any byte.

    Empty lines ahead of the start line are tolerated and kept in the raw bytes.
    """
    raw = b""
    while True:
        try:
            block = await reader.readuntil(b"\r\n\r\n")
        except asyncio.IncompleteReadError as exc:
            if raw or exc.partial.strip(b"\r\n"):
                raise HttpError(HttpErrorKind.TRUNCATED, "connection closed inside message head") from None
            if exc.partial:
                raise HttpError(HttpErrorKind.TRUNCATED, "connection closed before start line") from None
            return None
        except asyncio.LimitOverrunError:
            raise HttpError(HttpErrorKind.TOO_LARGE, f"header section exceeds {MAX_HEAD} bytes") from None
        raw += block
        lines = block[:-4].split(b"\r\n")
        while lines and not lines[0]:
            lines.pop(0)
        if lines:
            return raw, lines[0], lines[1:], time.perf_counter()
        if len(raw) > MAX_HEAD:
            raise _malformed("too many empty lines")


def _parse_header_lines(lines: Sequence[bytes]) -> Headers:
    items = []
    for line in lines:
        if b"\r" in line or b"\n" in line:
            raise _malformed("bare CR or LF inside header section")
        if line[:1] in (b" ", b"\t"):
            raise _malformed("obsolete header line folding")
        name, sep, value = line.partition(b":")
        if not sep or not _TOKEN.match(name):
            raise _malformed(f"bad header line {line[:60]!r}")
        items.append((name.decode("ascii"), value.strip(b" \t").decode("latin-1")))
    return Headers(items)


def _request_framing(headers: Headers) -> tuple[str, int]:
    te = headers.tokens("transfer-encoding")
    lengths = headers.get_all("content-length")
    if te and lengths:
        # Ambiguous framing is the classic smuggling vector; refuse it.
        raise _malformed("both Transfer-Encoding and Content-Length present")
    if te:
        if te[-1] != "chunked":
            raise _malformed(f"unsupported transfer coding {te[-1]!r}")
        return "chunked", 0
    if lengths:
        values = {v.strip() for lv in lengths for v in lv.split(",")}
        if len(values) != 1 or not next(iter(values)).isdigit():
            raise _malformed(f"invalid Content-Length {lengths!r}")
        return "length", int(values.pop())
    return "none", 0


async def _iter_chunked(reader: asyncio.StreamReader, limit: int | None) -> AsyncIterator[tuple[bytes, bytes]]:
    total = 0
    try:
        while True:
            line = await _readline(reader)
            if not line.endswith(b"\n"):
                raise HttpError(HttpErrorKind.TRUNCATED, "connection closed inside chunk size")
            size_text = _strip_eol(line).split(b";", 1)[0].strip()
            try:
                size = int(size_text, 16)
            except ValueError:
                raise _malformed(f"bad chunk size {size_text[:20]!r}") from None
            if size < 0:
                raise _malformed("negative chunk size")
            if size == 0:
                trailer = bytearray(line)
                while True:
                    tline = await _readline(reader)
                    if not tline.endswith(b"\n"):
                        raise HttpError(HttpErrorKind.TRUNCATED, "connection closed inside trailers")
                    trailer += tline
                    if tline in (b"\r\n", b"\n"):
                        break
                    if len(trailer) > MAX_HEAD:
                        raise HttpError(HttpErrorKind.TOO_LARGE, "trailer section too large")
                yield bytes(trailer), b""
                return
            total += size
            if limit is not None and total > limit:
                raise HttpError(HttpErrorKind.TOO_LARGE, f"body exceeds {limit} bytes")
            data = await reader.readexactly(size)
            crlf = await reader.readexactly(2)
            if crlf != b"\r\n":
                raise _malformed("chunk not terminated by CRLF")
            yield line + data + crlf, data
    except asyncio.IncompleteReadError:
        raise HttpError(HttpErrorKind.TRUNCATED, "connection closed inside chunked body") from None


async def read_request(reader: asyncio.StreamReader, max_body: int = MAX_BODY) -> HttpRequest | None:
    """Read one request. Returns None if the peer closed between requests."""
    head = await _read_head(reader)
    if head is None:
        return None
    raw_head, start, header_lines, started = head
    parts = start.split(b" ")
    if len(parts) != 3 or not parts[1]:
        if start.startswith(b"PRI * HTTP/2"):
            raise _malformed("HTTP/2 is not supported")
        raise _malformed(f"bad request line {start[:60]!r}")
    method_b, target_b, version_b = parts
    if b"\r" in start or b"\n" in start:
        raise _malformed("bare CR or LF in request line")
    if not _TOKEN.match(method_b):
        raise _malformed(f"bad method {method_b[:20]!r}")
    version_match = _VERSION.match(version_b)
    if not version_match:
        raise _malformed(f"bad version {version_b[:20]!r}")
    if version_match.group(1) != b"1":
        raise _malformed(f"{version_b.decode('ascii')} is not supported")
    method = method_b.decode("ascii")
    target = target_b.decode("latin-1")
    try:
        headers = _parse_header_lines(header_lines)
        kind, length = _request_framing(headers)
        raw = bytearray(raw_head)
        if kind == "length":
            if length > max_body:
                raise HttpError(HttpErrorKind.TOO_LARGE, f"body of {length} bytes exceeds {max_body}")
            try:
                body = await reader.readexactly(length)
            except asyncio.IncompleteReadError:
                raise HttpError(HttpErrorKind.TRUNCATED, "connection closed inside body") from None
            raw += body
        elif kind == "chunked":
            pieces = []
            async for raw_piece, data in _iter_chunked(reader, max_body):
                raw += raw_piece
                pieces.append(data)
            body = b"".join(pieces)
        else:
            body = b""
    except HttpError as exc:
        exc.method, exc.target = method, target
        raise
    path, _, query = target.partition("?")
    return HttpRequest(
        method=method,
        path=path,
        query=query,
        version=version_b.decode("ascii"),
        headers=headers,
        body=body,
        raw=bytes(raw),
        request_line=start,
        header_lines=header_lines,
        started=started,
    )


def _parse_status(start: bytes) -> tuple[str, int, str]:
    match = _STATUS_LINE.match(start)
    if not match:
        raise _malformed(f"bad status line {start[:60]!r}")
    return match.group(1).decode("ascii"), int(match.group(2)), (match.group(3) or b"").decode("latin-1")


def response_framing(method: str, status: int, headers: Headers) -> tuple[str, int]:
    """How the response body is delimited: none, length, chunked, or close."""
    if method.upper() == "HEAD" or status < 200 or status in (204, 304):
        return "none", 0
    te = headers.tokens("transfer-encoding")
    if te:
        return ("chunked", 0) if te[-1] == "chunked" else ("close", 0)
    lengths = headers.get_all("content-length")
    if lengths:
        values = {v.strip() for lv in lengths for v in lv.split(",")}
        if len(values) != 1 or not next(iter(values)).isdigit():
            raise _malformed(f"invalid Content-Length {lengths!r}")
        return "length", int(values.pop())
    return "close", 0


async def _read_response_head(reader: asyncio.StreamReader) -> tuple[bytes, str, int, str, Headers]:
    head = await _read_head(reader)
    if head is None:
        raise HttpError(HttpErrorKind.TRUNCATED, "connection closed before response")
    raw, start, lines, _ = head
    version, status, reason = _parse_status(start)
    return raw, version, status, reason, _parse_header_lines(lines)


async def read_response(reader: asyncio.StreamReader, method: str = "GET") -> HttpResponse:
    """Read one complete response, buffering the body. Interim 1xx are skipped."""
    raw = bytearray()
    while True:
        raw_head, version, status, reason, headers = await _read_response_head(reader)
        raw += raw_head
        if status >= 200 or status == 101:
            break
    kind, length = response_framing(method, status, headers)
    if status == 101:
        kind = "none"
    try:
        if kind == "length":
            body = await reader.readexactly(length)
            raw += body
        elif kind == "chunked":
            pieces = []
            async for raw_piece, data in _iter_chunked(reader, None):
                raw += raw_piece
                pieces.append(data)
            body = b"".join(pieces)
        elif kind == "close":
            body = await reader.read()
            raw += body
        else:
            body = b""
    except asyncio.IncompleteReadError:
        raise HttpError(HttpErrorKind.TRUNCATED, "connection closed inside response body") from None
    return HttpResponse(status, reason, headers, body, version, raw=bytes(raw))


@dataclass
class RelayResult:
    status: int
    keep_alive: bool
    # The connection must become a raw byte tunnel (101 or close-delimited body).
    tunnel: bool
    first_byte_at: float
    bytes_relayed: int


async def relay_response(
    upstream: asyncio.StreamReader,
    client: asyncio.StreamWriter,
    method: str,
) -> RelayResult:
    """Copy one response from ``upstream`` to ``client`` byte for byte.

    Raises :class:`HttpError` if nothing could be read. Once bytes have been
    written to the client, failures propagate as-is and the caller must drop
    the connection.
    """
    first_byte_at = 0.0
    sent = 0
    while True:
        raw_head, version, status, _reason, headers = await _read_response_head(upstream)
        if status >= 200 or status == 101:
            break
        client.write(raw_head)
        sent += len(raw_head)
        first_byte_at = first_byte_at or time.perf_counter()
        await client.drain()

    if status == 101:
        client.write(raw_head)
        first_byte_at = first_byte_at or time.perf_counter()
        await client.drain()
        return RelayResult(status, False, True, first_byte_at, sent + len(raw_head))

    kind, length = response_framing(method, status, headers)
    if kind == "length" and length <= _RELAY_BLOCK:
        # Small bodies go out in the same write as the head.
        try:
            body = await upstream.readexactly(length)
        except asyncio.IncompleteReadError:
            raise HttpError(HttpErrorKind.TRUNCATED, "upstream closed inside response body") from None
        client.write(raw_head + body)
        first_byte_at = first_byte_at or time.perf_counter()
        sent += len(raw_head) + length
    else:
        client.write(raw_head)
        first_byte_at = first_byte_at or time.perf_counter()
        sent += len(raw_head)
    if kind == "length" and length > _RELAY_BLOCK:
        remaining = length
        while remaining:
            block = await upstream.read(min(remaining, _RELAY_BLOCK))
            if not block:
                raise HttpError(HttpErrorKind.TRUNCATED, "upstream closed inside response body")
            client.write(block)
            sent += len(block)
            remaining -= len(block)
            await client.drain()
    elif kind == "chunked":
        async for raw_piece, _data in _iter_chunked(upstream, None):
            client.write(raw_piece)
            sent += len(raw_piece)
            await client.drain()
    await client.drain()
    keep_alive = _keep_alive(version, headers) and kind != "close"
    return RelayResult(status, keep_alive, kind == "close", first_byte_at, sent)


def json_response(status: int, message: str) -> HttpResponse:
    """A daemon-shaped error: ``{"message": ...}`` as application/json."""
    body = json.dumps({"message": message}).encode()
    headers = Headers(
        [
            ("Content-Type", "application/json"),
            ("Content-Length", str(len(body))),
        ]
    )
    return HttpResponse(status, HTTPStatus(status).phrase, headers, body)


def craft_denial_response(violations: Sequence[object]) -> HttpResponse:
    """403 listing every violation, in rule-kind order."""
    if not violations:
        raise ValueError("a denial needs at least one violation")
    from .policy import RULE_KINDS

    def rank(v: object) -> int:
        kind = getattr(v, "rule_kind", None)
        return RULE_KINDS.index(kind) if kind in RULE_KINDS else len(RULE_KINDS)

    listed = ", ".join(str(v) for v in sorted(violations, key=rank))
    return json_response(403, f"SecDocker: forbidden option(s): {listed}")


def rewrite_request(req: HttpRequest, new_body: bytes) -> bytes:
    """Re-emit ``req`` with ``new_body`` framed by Content-Length.

    Other header lines are copied byte for byte and in order. Chunked trailers
    are dropped.
    """
    out = [req.request_line]
    placed = False
    length_line = b"Content-Length: " + str(len(new_body)).encode()
    for line in req.header_lines:
        name = line.split(b":", 1)[0].strip().lower()
        if name in (b"content-length", b"transfer-encoding"):
            if not placed:
                out.append(length_line)
                placed = True
            continue
        out.append(line)
    if not placed:
        out.append(length_line)
    return b"\r\n".join(out) + b"\r\n\r\n" + new_body


def reader_from_bytes(data: bytes) -> asyncio.StreamReader:
    """A closed StreamReader preloaded with ``data`` (must run inside a loop)."""
    reader = asyncio.StreamReader(limit=MAX_HEAD)
    reader.feed_data(data)
    reader.feed_eof()
    return reader


def parse_request_bytes(data: bytes) -> HttpRequest | None:
    async def _go() -> HttpRequest | None:
        return await read_request(reader_from_bytes(data))

    return asyncio.run(_go())


def parse_response_bytes(data: bytes, method: str = "GET") -> HttpResponse:
    async def _go() -> HttpResponse:
        return await read_response(reader_from_bytes(data), method)

    return asyncio.run(_go())
