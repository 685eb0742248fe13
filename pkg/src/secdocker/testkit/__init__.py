"""Offline stand-ins for the daemon plus the latency benchmark harness."""

from .bench import BenchmarkResult, run_latency_benchmark
from .mock_daemon import MockDaemon, RecordedRequest
from .stats import LatencyStats, compute_stats

__all__ = [
    "BenchmarkResult",
    "LatencyStats",
    "MockDaemon",
    "RecordedRequest",
    "compute_stats",
    "run_latency_benchmark",
]
