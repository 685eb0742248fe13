"""Summary statistics for latency samples (all values in seconds)."""
from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class LatencyStats:
    sample_count: int
    mean: float
    standard_error: float
    mode: float
    median: float
    first_quartile: float
    third_quartile: float
    variance: float
    standard_deviation: float
    minimum: float
    maximum: float

    @property
    def interquartile_range(self) -> float:
        return self.third_quartile - self.first_quartile

    def as_rows(self) -> list[tuple[str, float]]:
        return [
            ("Mean", self.mean),
            ("Standard Error", self.standard_error),
            ("Mode", self.mode),
            ("Median", self.median),
            ("First Quartile", self.first_quartile),
            ("Third Quartile", self.third_quartile),
            ("Variance", self.variance),
            ("Standard Deviation", self.standard_deviation),
        ]


def _mode(samples: Sequence[float]) -> float:
    # Most frequent value at millisecond resolution; ties go to the smallest.
    counts = Counter(round(s, 3) for s in samples)
    top = max(counts.values())
    return min(value for value, count in counts.items() if count == top)


def compute_stats(samples: Sequence[float]) -> LatencyStats:
    """Population variance; quartiles by inclusive linear interpolation."""
    if not samples:
        raise ValueError("compute_stats needs at least one sample")
    data = [float(s) for s in samples]
    n = len(data)
    variance = statistics.pvariance(data)
    sd = math.sqrt(variance)
    if n > 1:
        q1, median, q3 = statistics.quantiles(data, n=4, method="inclusive")
    else:
        q1 = median = q3 = data[0]
    return LatencyStats(
        sample_count=n,
        mean=statistics.fmean(data),
        standard_error=sd / math.sqrt(n),
        mode=_mode(data),
        median=median,
        first_quartile=q1,
        third_quartile=q3,
        variance=variance,
        standard_deviation=sd,
        minimum=min(data),
        maximum=max(data),
    )
