"""Arrival-rate traces: parsing, scaling, windowing and synthetic spikes.

Rates are stored in requests per second regardless of the input unit.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

from .errors import TraceError

PER_MINUTE = "per_minute"
PER_SECOND = "per_second"
_UNIT_DIVISOR = {PER_MINUTE: 60.0, PER_SECOND: 1.0}

# relative slack when checking uniform spacing of float timestamps
_SPACING_RTOL = 1e-9


@dataclass(frozen=True)
class LoadTrace:
    """Uniformly sampled request-rate series (req/s)."""

    times: tuple[float, ...]
    rates: tuple[float, ...]
    resolution: float

    def __post_init__(self):
        if not self.times:
            raise TraceError("trace must contain at least one point")
        if len(self.times) != len(self.rates):
            raise TraceError("times and rates differ in length")
        if not (math.isfinite(self.resolution) and self.resolution > 0):
            raise TraceError(f"resolution must be positive, got {self.resolution}")
        for r in self.rates:
            if not math.isfinite(r) or r < 0:
                raise TraceError(f"rates must be finite and >= 0, got {r}")
        t0 = self.times[0]
        for i, t in enumerate(self.times):
            expected = t0 + i * self.resolution
            if not math.isclose(t, expected, rel_tol=_SPACING_RTOL, abs_tol=1e-9 * self.resolution):
                raise TraceError(
                    f"non-uniform spacing at index {i}: t={t}, expected {expected}"
                )

    @classmethod
    def from_rates(cls, rates: Sequence[float], resolution: float, start: float = 0.0) -> "LoadTrace":
        times = tuple(start + i * resolution for i in range(len(rates)))
        return cls(times, tuple(float(r) for r in rates), float(resolution))

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.times, self.rates))

    @property
    def start(self) -> float:
        return self.times[0]

    @property
    def end(self) -> float:
        return self.times[-1]

    @property
    def span(self) -> float:
        return self.end - self.start

    @property
    def peak(self) -> float:
        return max(self.rates)

    def __len__(self):
        return len(self.times)

    def __iter__(self) -> Iterator[tuple[float, float]]:
        return iter(zip(self.times, self.rates))


@dataclass(frozen=True)
class SpikeSpec:
    start: float
    baseline_rate: float
    peak_rate: float
    ramp_up: float = 0.0
    hold: float = 0.0
    decay: float = 0.0

    def __post_init__(self):
        if not (self.peak_rate >= self.baseline_rate >= 0):
            raise TraceError(
                f"need peak_rate >= baseline_rate >= 0, got {self.peak_rate}, {self.baseline_rate}"
            )
        for name in ("start", "ramp_up", "hold", "decay"):
            if getattr(self, name) < 0:
                raise TraceError(f"{name} must be >= 0")

    @property
    def end(self) -> float:
        return self.start + self.ramp_up + self.hold + self.decay

    def rate(self, t: float) -> float:
        """Exact piecewise-linear rate of the spike at time ``t``."""
        b, p = self.baseline_rate, self.peak_rate
        t_rise = self.start + self.ramp_up
        t_hold = t_rise + self.hold
        t_end = t_hold + self.decay
        if t < self.start:
            return b
        if t < t_rise:
            return b + (p - b) * (t - self.start) / self.ramp_up
        if t <= t_hold:
            return p
        if t < t_end:
            return p - (p - b) * (t - t_hold) / self.decay
        return b


def parse_trace(path, unit: str = PER_SECOND) -> LoadTrace:
    """Read a ``timestamp,rate`` CSV file.

    A non-numeric first row is treated as a header. Blank lines are skipped.
    ``unit`` is the unit of the rate column; ``per_minute`` rates are divided
    by 60.
    """
    if unit not in _UNIT_DIVISOR:
        raise TraceError(f"unknown unit {unit!r}; expected one of {sorted(_UNIT_DIVISOR)}")
    divisor = _UNIT_DIVISOR[unit]
    times: list[float] = []
    rates: list[float] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise TraceError(f"line {lineno}: expected 2 columns, got {len(row)}")
            try:
                t, r = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1 and not times:
                    continue  # header
                raise TraceError(f"line {lineno}: malformed row {row!r}") from None
            if not (math.isfinite(t) and math.isfinite(r)):
                raise TraceError(f"line {lineno}: non-finite value")
            if r < 0:
                raise TraceError(f"line {lineno}: negative rate {r}")
            if times and t <= times[-1]:
                raise TraceError(f"line {lineno}: timestamps must be strictly increasing")
            times.append(t)
            rates.append(r / divisor)
    if not times:
        raise TraceError(f"{path}: no data rows")
    resolution = times[1] - times[0] if len(times) > 1 else 1.0
    return LoadTrace(tuple(times), tuple(rates), resolution)


def scale_trace(trace: LoadTrace, factor: float) -> LoadTrace:
    if not (isinstance(factor, (int, float)) and math.isfinite(factor) and factor > 0):
        raise TraceError(f"scale factor must be positive and finite, got {factor!r}")
    return LoadTrace(trace.times, tuple(r * factor for r in trace.rates), trace.resolution)


def extract_window(trace: LoadTrace, start: float, duration: float) -> LoadTrace:
    """Cut ``[start, start + duration]`` out of ``trace`` and re-base it at 0.

    Only sample points inside the window are kept, so aligned windows keep
    their rates bit-for-bit.
    """
    if duration < 0 or start < trace.start or start + duration > trace.end + 1e-9 * trace.resolution:
        raise TraceError(
            f"window [{start}, {start + duration}] outside trace span [{trace.start}, {trace.end}]"
        )
    eps = 1e-9 * trace.resolution
    lo = bisect.bisect_left(trace.times, start - eps)
    hi = bisect.bisect_right(trace.times, start + duration + eps)
    if lo >= hi:
        raise TraceError("window contains no sample points")
    t0 = trace.times[lo]
    times = tuple(t - t0 for t in trace.times[lo:hi])
    return LoadTrace(times, trace.rates[lo:hi], trace.resolution)


def synthesize_spike(spec: SpikeSpec, total: float, resolution: float = 1.0) -> LoadTrace:
    """Sample a :class:`SpikeSpec` on a uniform grid covering ``[0, total]``."""
    if resolution <= 0:
        raise TraceError("resolution must be positive")
    if total < spec.end:
        raise TraceError(f"total {total} shorter than spike end {spec.end}")
    n = int(math.floor(total / resolution + 1e-9)) + 1
    rates = [spec.rate(i * resolution) for i in range(n)]
    return LoadTrace.from_rates(rates, resolution)


def constant_trace(rate: float, total: float, resolution: float = 1.0) -> LoadTrace:
    n = int(math.floor(total / resolution + 1e-9)) + 1
    return LoadTrace.from_rates([rate] * n, resolution)


def rate_at(trace: LoadTrace, t: float) -> float:
    if not (trace.start <= t <= trace.end):
        raise TraceError(f"t={t} outside trace span [{trace.start}, {trace.end}]")
    if len(trace) == 1:
        return trace.rates[0]
    pos = (t - trace.start) / trace.resolution
    i = min(int(pos), len(trace) - 2)
    frac = pos - i
    if frac <= 0.0:
        return trace.rates[i]
    if frac >= 1.0:
        return trace.rates[i + 1]
    r0, r1 = trace.rates[i], trace.rates[i + 1]
    return r0 + (r1 - r0) * frac
