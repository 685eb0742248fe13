"""Sequential create+start latency benchmark.

Each iteration opens a fresh connection, like a separate ``docker run``
invocation would, and times create followed by start.
"""
from __future__ import annotations

import csv
import http.client
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_PAYLOAD = json.dumps({"Image": "alpine:latest"}).encode()
API_PREFIX = "/v1.41"


@dataclass
class BenchmarkResult:
    samples: list[float] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    # (iteration, seconds, ok) in run order, failures included.
    rows: list[tuple[int, float, bool]] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "seconds", "ok"])
            for iteration, seconds, ok in self.rows:
                writer.writerow([iteration, f"{seconds:.9f}", "true" if ok else "false"])


def _split_target(target: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(target, tuple):
        return target
    host, _, port = target.rpartition(":")
    return host or "127.0.0.1", int(port)


def _exchange(host: str, port: int, payload: bytes, timeout: float) -> None:
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request("POST", f"{API_PREFIX}/containers/create", body=payload,
                     headers={"Content-Type": "application/json"})
        resp = conn.getresponse()
        body = resp.read()
        if resp.status != 201:
            raise RuntimeError(f"create returned {resp.status}: {body[:200]!r}")
        cid = json.loads(body)["Id"]
        conn.request("POST", f"{API_PREFIX}/containers/{cid}/start", body=b"",
                     headers={"Content-Type": "application/json"})
        resp = conn.getresponse()
        body = resp.read()
        if resp.status not in (204, 304):
            raise RuntimeError(f"start returned {resp.status}: {body[:200]!r}")
    finally:
        conn.close()


def run_latency_benchmark(
    target: str | tuple[str, int],
    iterations: int,
    payload: bytes = DEFAULT_PAYLOAD,
    timeout: float = 10.0,
) -> BenchmarkResult:
    host, port = _split_target(target)
    result = BenchmarkResult()
    for i in range(iterations):
        started = time.perf_counter()
        try:
            _exchange(host, port, payload, timeout)
        except Exception as exc:
            elapsed = time.perf_counter() - started
            result.failures.append(f"iteration {i}: {exc}")
            result.rows.append((i, elapsed, False))
            continue
        elapsed = time.perf_counter() - started
        result.samples.append(elapsed)
        result.rows.append((i, elapsed, True))
    return result
