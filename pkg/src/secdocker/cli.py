"""Command line entry points: ``secdocker`` and ``secdocker-bench``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .audit import AuditIOError, AuditSink
from .config import ConfigError, ProfileStore, ProfileWatcher
from .plugins import PluginRegistry, StubImageScan, StubSignatureVerify
from .proxy import DEFAULT_PORT, ProxyBindError, ProxySettings, run_proxy

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BIND = 2

log = logging.getLogger("secdocker")


def _env_default(name: str, fallback: str | None) -> str | None:
    return os.environ.get(name) or fallback


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secdocker", description="Application firewall for the Docker Engine API")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="start the firewall proxy")
    run.add_argument("--config", help="YAML security profile [env SECDOCKER_CONFIG]")
    run.add_argument("--listen", help=f"listen address [env SECDOCKER_LISTEN, default 0.0.0.0:{DEFAULT_PORT}]")
    run.add_argument("--upstream", help="Docker daemon host:port [env SECDOCKER_UPSTREAM]")
    run.add_argument("--log-file", help="audit log file (in addition to stdout)")
    run.add_argument("--log-json", action="store_true", help="write audit records as JSON lines")
    run.add_argument("--verbose", "-v", action="store_true", help="debug logging, including pass-through requests")
    run.add_argument("--scan-fixture", help="enable the image-scan plugin with this fixture file")
    run.add_argument("--trust-fixture", help="enable the signature-verify plugin with this fixture file")
    run.add_argument("--idle-timeout", type=float, default=120.0, help="seconds before idle connections close")
    run.add_argument("--max-connections", type=int, default=1024)

    mock = sub.add_parser("mock-daemon", help="serve the recording mock daemon")
    mock.add_argument("--listen", default="127.0.0.1:2375")
    mock.add_argument("--delay", type=float, default=0.0, help="artificial service delay in seconds")
    return parser


def _run(args: argparse.Namespace) -> int:
    config = args.config or os.environ.get("SECDOCKER_CONFIG")
    listen = args.listen or _env_default("SECDOCKER_LISTEN", f"0.0.0.0:{DEFAULT_PORT}")
    upstream = args.upstream or os.environ.get("SECDOCKER_UPSTREAM")
    if not config:
        print("secdocker: --config (or SECDOCKER_CONFIG) is required", file=sys.stderr)
        return EXIT_CONFIG
    if not upstream:
        print("secdocker: --upstream (or SECDOCKER_UPSTREAM) is required", file=sys.stderr)
        return EXIT_CONFIG

    try:
        settings = ProxySettings.from_addresses(
            listen, upstream, connection_idle_timeout=args.idle_timeout, max_connections=args.max_connections
        )
    except ValueError as exc:
        print(f"secdocker: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    sink = AuditSink(args.log_file, json_lines=args.log_json)

    def on_event(level: str, message: str) -> None:
        try:
            sink.event(level, message)
        except AuditIOError as exc:
            log.error("audit logging degraded: %s", exc)

    try:
        store = ProfileStore(config, on_event=on_event)
    except ConfigError as exc:
        print(f"secdocker: cannot load {config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    plugins = PluginRegistry()
    if args.scan_fixture:
        plugins.register(StubImageScan.name, StubImageScan(args.scan_fixture))
    if args.trust_fixture:
        plugins.register(StubSignatureVerify.name, StubSignatureVerify(args.trust_fixture))

    watcher = ProfileWatcher(store).start()
    log.info("profile %s loaded; watching for changes (%s)", config, watcher.mode)
    try:
        run_proxy(settings, store, plugins, sink)
    except ProxyBindError as exc:
        print(f"secdocker: {exc.strerror}", file=sys.stderr)
        return EXIT_BIND
    finally:
        watcher.stop()
        sink.close()
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "run":
        return _run(args)
    if args.command == "mock-daemon":
        from .proxy import parse_address
        from .testkit.mock_daemon import mock_daemon_serve

        host, port = parse_address(args.listen)
        mock_daemon_serve(host, port, args.delay)
        return EXIT_OK
    return EXIT_CONFIG


def bench_main(argv: list[str] | None = None) -> int:
    from .testkit.bench import DEFAULT_PAYLOAD, run_latency_benchmark
    from .testkit.stats import compute_stats

    parser = argparse.ArgumentParser(prog="secdocker-bench", description="Time sequential create+start exchanges")
    parser.add_argument("--target", required=True, help="host:port of a daemon or of the proxy")
    parser.add_argument("-n", type=int, default=100, help="iterations (default 100)")
    parser.add_argument("--payload", type=Path, help="create-container JSON body")
    parser.add_argument("--csv", type=Path, help="write per-iteration timings here")
    args = parser.parse_args(argv)

    payload = args.payload.read_bytes() if args.payload else DEFAULT_PAYLOAD
    result = run_latency_benchmark(args.target, args.n, payload)
    if args.csv:
        result.write_csv(args.csv)
    print(f"samples: {len(result.samples)}  failures: {len(result.failures)}")
    for failure in result.failures[:5]:
        print(f"  {failure}")
    if result.samples:
        stats = compute_stats(result.samples)
        for label, value in stats.as_rows():
            print(f"{label:>20}  {value:.6f}")
    return 0 if not result.failures else 1


if __name__ == "__main__":
    sys.exit(main())
