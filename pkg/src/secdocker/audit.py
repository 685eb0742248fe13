"""Append-only audit trail of intercepted requests and operational events.

Every record goes to stdout and, when configured, to a log file. The file is
either JSON lines (one object per line) or logfmt-style text.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import sys
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, TextIO

log = logging.getLogger(__name__)

DECISIONS = ("allowed", "mutated", "denied", "error")


class AuditIOError(OSError):
    """A destination stopped accepting writes. Raised once per destination."""


def utc_timestamp(moment: dt.datetime | None = None) -> str:
    moment = moment or dt.datetime.now(dt.timezone.utc)
    return moment.astimezone(dt.timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


@dataclass(frozen=True)
class AuditRecord:
    client_address: str
    method: str
    path: str
    decision: str
    image: str | None = None
    reasons: tuple[str, ...] = ()
    plugin_verdicts: tuple[dict[str, Any], ...] = ()
    latency_micros: int = 0
    # Filled in by the sink at append time, so order in the log is time order.
    timestamp: str | None = None

    def __post_init__(self) -> None:
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r}")
        if self.decision == "denied" and not self.reasons:
            raise ValueError("a denied record needs reasons")
        if self.decision == "allowed" and self.reasons:
            raise ValueError("an allowed record carries no reasons")

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "client_address": self.client_address,
            "method": self.method,
            "path": self.path,
            "image": self.image,
            "decision": self.decision,
            "reasons": list(self.reasons),
            "plugin_verdicts": [dict(v) for v in self.plugin_verdicts],
            "latency_micros": self.latency_micros,
        }


def _quote(value: Any) -> str:
    text = value if isinstance(value, str) else json.dumps(value)
    if text and all(c.isalnum() or c in "-_./:@" for c in text):
        return text
    return json.dumps(text)


def _text_line(fields: dict[str, Any]) -> str:
    return " ".join(f"{key}={_quote(value)}" for key, value in fields.items() if value not in (None, [], ()))


class _Destination:
    def __init__(self, name: str, stream: TextIO | None = None, path: Path | None = None) -> None:
        self.name = name
        self.stream = stream
        self.path = path
        self.failed = False

    def write(self, line: str) -> None:
        if self.stream is None and self.path is not None:
            self.stream = self.path.open("a", encoding="utf-8")
        assert self.stream is not None
        self.stream.write(line + "\n")
        self.stream.flush()

    def close(self) -> None:
        if self.path is not None and self.stream is not None:
            self.stream.close()
            self.stream = None


class AuditSink:
    """Serialises appends from concurrent handlers.

    A destination that fails is reported once through :class:`AuditIOError`
    and then skipped; the others keep receiving records. ``degraded`` stays
    set from then on.
    """

    def __init__(
        self,
        log_file: str | Path | None = None,
        json_lines: bool = True,
        stdout: TextIO | None | bool = True,
    ) -> None:
        self.json_lines = json_lines
        self._lock = threading.Lock()
        self._last = ""
        self.degraded = False
        self._dests: list[_Destination] = []
        if stdout is True:
            self._dests.append(_Destination("stdout", stream=sys.stdout))
        elif stdout:
            self._dests.append(_Destination("stdout", stream=stdout))
        if log_file is not None:
            self._dests.append(_Destination(str(log_file), path=Path(log_file)))

    def _stamp(self) -> str:
        now = utc_timestamp()
        # Wall clocks can step backwards; the log must not.
        self._last = max(now, self._last)
        return self._last

    def _format(self, fields: dict[str, Any]) -> str:
        if self.json_lines:
            return json.dumps(fields, separators=(",", ":"), default=str)
        return _text_line(fields)

    def _append(self, fields_for: Any) -> None:
        failures: list[str] = []
        with self._lock:
            fields = fields_for(self._stamp())
            line = self._format(fields)
            for dest in self._dests:
                if dest.failed:
                    continue
                try:
                    dest.write(line)
                except (OSError, ValueError) as exc:
                    dest.failed = True
                    self.degraded = True
                    failures.append(f"{dest.name}: {exc}")
        if failures:
            raise AuditIOError("audit destination failed: " + "; ".join(failures))

    def record(self, rec: AuditRecord) -> AuditRecord:
        """Append one record; returns it with the timestamp it was logged under."""
        stamped: list[AuditRecord] = []

        def build(ts: str) -> dict[str, Any]:
            final = replace(rec, timestamp=ts)
            stamped.append(final)
            if self.json_lines:
                return final.to_dict()
            data = final.to_dict()
            ts = data.pop("timestamp")
            level = "warning" if final.decision in ("denied", "error") else "info"
            return {"time": ts, "level": level, "msg": "intercepted request", **data}

        self._append(build)
        return stamped[0]

    def event(self, level: str, message: str, **details: Any) -> None:
        """Operational event (reloads, upstream failures). Never a record."""

        def build(ts: str) -> dict[str, Any]:
            key = "timestamp" if self.json_lines else "time"
            return {key: ts, "level": level, "event": message, **details}

        self._append(build)

    def close(self) -> None:
        with self._lock:
            for dest in self._dests:
                dest.close()


def record(sink: AuditSink, rec: AuditRecord) -> AuditRecord:
    return sink.record(rec)


def read_records(path: str | Path) -> list[dict[str, Any]]:
    """Intercept records from a JSON-lines log, skipping operational events."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            if "decision" in obj:
                out.append(obj)
    return out
