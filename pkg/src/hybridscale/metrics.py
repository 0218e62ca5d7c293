"""Latency percentiles, SLO-violation intervals, cost accounting and run comparison."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from statistics import median
from typing import Iterable, Sequence

import numpy as np

DEFAULT_SLO_MS = 400.0
DEFAULT_WINDOW_S = 5.0


@dataclass
class LatencyRecords:
    """Column store of per-request outcomes.

    ``end`` is the completion time, or the instant the client gave up for
    timed-out requests. ``latency_ms`` is +inf for timeouts.
    """

    request_id: np.ndarray
    arrival: np.ndarray
    end: np.ndarray
    latency_ms: np.ndarray
    entry: list[str]
    tiers: list[str]

    @classmethod
    def from_requests(cls, requests, timeout_s: float) -> "LatencyRecords":
        n = len(requests)
        ids = np.empty(n, dtype=np.int64)
        arr = np.empty(n)
        end = np.empty(n)
        lat = np.empty(n)
        entry, tiers = [], []
        for i, r in enumerate(requests):
            ids[i] = r.id
            arr[i] = r.arrival_time
            if r.completion_time is not None:
                end[i] = r.completion_time
                lat[i] = (r.completion_time - r.arrival_time) * 1000.0
            else:
                end[i] = r.arrival_time + timeout_s
                lat[i] = math.inf
            entry.append(r.entry)
            tiers.append("".join(r.tiers))
        return cls(ids, arr, end, lat, entry, tiers)

    @classmethod
    def from_latencies(cls, latencies_ms: Sequence[float], at: float = 0.0) -> "LatencyRecords":
        """Records that all finish at ``at``; convenient for single-window checks."""
        lat = np.asarray(latencies_ms, dtype=float)
        n = len(lat)
        end = np.full(n, float(at))
        arrival = np.where(np.isfinite(lat), end - np.nan_to_num(lat, posinf=0) / 1000.0, end)
        return cls(np.arange(n), arrival, end, lat, [""] * n, [""] * n)

    def __len__(self):
        return len(self.latency_ms)

    @property
    def timeouts(self) -> int:
        return int(np.count_nonzero(np.isinf(self.latency_ms)))

    def subset(self, mask: np.ndarray) -> "LatencyRecords":
        idx = np.flatnonzero(mask)
        return LatencyRecords(self.request_id[idx], self.arrival[idx], self.end[idx],
                              self.latency_ms[idx], [self.entry[i] for i in idx],
                              [self.tiers[i] for i in idx])


def nearest_rank(sorted_values, p: float) -> float:
    n = len(sorted_values)
    rank = max(math.ceil(p * n - 1e-12), 1)
    return float(sorted_values[rank - 1])


def percentile_window(records: LatencyRecords, window_s: float = DEFAULT_WINDOW_S, p: float = 0.95,
                      key: str = "completion", start: float = 0.0) -> list[tuple[float, float]]:
    """Nearest-rank percentile per tumbling window, as ``(window_end, latency_ms)``.

    Requests are bucketed by ``end`` (``key="completion"``) or by ``arrival``.
    Windows without requests are omitted, not filled.
    """
    if not (0 < p < 1):
        raise ValueError(f"p must be in (0, 1), got {p}")
    if not window_s > 0:
        raise ValueError("window_s must be > 0")
    if key not in ("completion", "arrival"):
        raise ValueError(f"key must be 'completion' or 'arrival', got {key!r}")
    if len(records) == 0:
        return []
    t = records.end if key == "completion" else records.arrival
    idx = np.floor((t - start) / window_s + 1e-9).astype(np.int64)
    order = np.lexsort((records.latency_ms, idx))
    idx_sorted = idx[order]
    lat_sorted = records.latency_ms[order]
    bounds = np.flatnonzero(np.diff(idx_sorted)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [len(idx_sorted)]))
    out = []
    for s, e in zip(starts, ends):
        w = int(idx_sorted[s])
        out.append((start + (w + 1) * window_s, nearest_rank(lat_sorted[s:e], p)))
    return out


@dataclass
class SloReport:
    slo_ms: float
    window_s: float
    violation_intervals_p50: list[list[float]] = field(default_factory=list)
    violation_intervals_p95: list[list[float]] = field(default_factory=list)
    total_violation_s_p50: float = 0.0
    total_violation_s_p95: float = 0.0
    peak_p50_ms: float = 0.0
    peak_p95_ms: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("peak_p50_ms", "peak_p95_ms"):
            if math.isinf(d[k]):
                d[k] = "inf"
        return d


def slo_intervals(series: Sequence[tuple[float, float]], slo_ms: float = DEFAULT_SLO_MS,
                  window_s: float = DEFAULT_WINDOW_S) -> tuple[list[list[float]], float]:
    """Maximal ``[start, end]`` spans where the series exceeds ``slo_ms``.

    Each point stands for the window ``(end - window_s, end]``; a missing
    window breaks a span. Returns the intervals and their summed length.
    """
    intervals: list[list[float]] = []
    last_bad_end = None
    for end, value in series:
        if value > slo_ms:
            if last_bad_end is not None and abs(last_bad_end - (end - window_s)) < 1e-9:
                intervals[-1][1] = end
            else:
                intervals.append([end - window_s, end])
            last_bad_end = end
        else:
            last_bad_end = None
    return intervals, float(sum(e - s for s, e in intervals))


def slo_report(records: LatencyRecords, slo_ms: float = DEFAULT_SLO_MS,
               window_s: float = DEFAULT_WINDOW_S) -> SloReport:
    p50 = percentile_window(records, window_s, 0.50)
    p95 = percentile_window(records, window_s, 0.95)
    i50, t50 = slo_intervals(p50, slo_ms, window_s)
    i95, t95 = slo_intervals(p95, slo_ms, window_s)
    return SloReport(slo_ms, window_s, i50, i95, t50, t95,
                     max((v for _, v in p50), default=0.0), max((v for _, v in p95), default=0.0))


@dataclass
class CostReport:
    vm_cost: float
    faas_cost: float
    total: float
    vm_node_seconds: float = 0.0
    faas_invocations: int = 0
    faas_gb_seconds: float = 0.0
    normalized_to_baseline: float | None = None
    baseline_id: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def vm_cost(node_seconds: float, hourly_rate: float) -> float:
    return node_seconds * hourly_rate / 3600.0


def cost_total(run, baseline=None) -> CostReport:
    """Combine VM node-seconds and the FaaS ledger of a finished run.

    ``run`` (and ``baseline``) expose ``scenario_id`` and ``cost`` (a
    :class:`CostReport` without normalisation). Normalisation requires both
    runs to come from the same scenario.
    """
    base = run.cost
    rep = CostReport(base.vm_cost, base.faas_cost, base.vm_cost + base.faas_cost,
                     base.vm_node_seconds, base.faas_invocations, base.faas_gb_seconds)
    if baseline is not None:
        if baseline.scenario_id != run.scenario_id:
            raise ValueError(
                f"cannot normalise {run.scenario_id!r} against baseline {baseline.scenario_id!r}"
            )
        b = baseline.cost.vm_cost + baseline.cost.faas_cost
        rep.normalized_to_baseline = rep.total / b if b > 0 else math.inf
        rep.baseline_id = baseline.label
    return rep


def summary_compare(runs: Sequence[dict]) -> list[dict]:
    """Table rows for summaries shaped like ``RunReport.summary()``.

    The first run is the reference for the peak-tail reduction and cost
    ratio columns, which are omitted when only one run is given.
    """
    if not runs:
        raise ValueError("need at least one run")
    ref = runs[0]
    rows = []
    for r in runs:
        row = {
            "label": r["label"],
            "peak_p50_ms": r["peak_p50_ms"],
            "peak_p95_ms": r["peak_p95_ms"],
            "violation_s_p50": r["violation_s_p50"],
            "violation_s_p95": r["violation_s_p95"],
            "vm_cost": r["vm_cost"],
            "faas_cost": r["faas_cost"],
            "total_cost": r["total_cost"],
        }
        if len(runs) > 1:
            row["peak_p95_reduction_pct"] = peak_reduction_pct(ref["peak_p95_ms"], r["peak_p95_ms"])
            row["cost_vs_first"] = r["total_cost"] / ref["total_cost"] if ref["total_cost"] else math.inf
        rows.append(row)
    return rows


def peak_reduction_pct(reference_ms: float, value_ms: float) -> float:
    """Percent by which ``value_ms`` undercuts ``reference_ms``.

    An infinite reference (timeouts) against a finite value counts as 100%.
    """
    ref, val = float(reference_ms), float(value_ms)
    if math.isinf(ref):
        return 0.0 if math.isinf(val) else 100.0
    if ref <= 0:
        return 0.0
    return (ref - val) / ref * 100.0


def median_summary(summaries: Iterable[dict]) -> dict:
    """Per-metric median across repetitions (numeric fields only)."""
    summaries = list(summaries)
    out = dict(summaries[0])
    for k, v in summaries[0].items():
        vals = [s[k] for s in summaries]
        if all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in vals):
            out[k] = median(vals)
    return out


def series_csv(p50: Sequence[tuple[float, float]], p95: Sequence[tuple[float, float]]) -> str:
    """``window_end_s,p50_ms,p95_ms`` rows; both series come from the same windows."""
    d95 = dict(p95)
    lines = ["window_end_s,p50_ms,p95_ms"]
    for end, v50 in p50:
        v95 = d95[end]
        lines.append(f"{end:g},{_fmt(v50)},{_fmt(v95)}")
    return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.3f}"


def pre_event_level(series: Sequence[tuple[float, float]], at: float, lookback_s: float = 60.0) -> float:
    """Median of the series over windows ending in ``(at - lookback_s, at]``."""
    vals = [v for end, v in series if at - lookback_s < end <= at]
    if not vals:
        raise ValueError(f"no windows in the {lookback_s}s before t={at}")
    return float(median(vals))


def recovery_time(series: Sequence[tuple[float, float]], since: float, bound: float,
                  consecutive: int = 2) -> float:
    """Seconds from ``since`` to the end of the first window that starts a run
    of ``consecutive`` windows at or below ``bound``; +inf if none does."""
    after = [(end, v) for end, v in series if end > since]
    for i in range(len(after) - consecutive + 1):
        if all(v <= bound for _, v in after[i:i + consecutive]):
            return after[i][0] - since
    return math.inf


def longest_run_above(series: Sequence[tuple[float, float]], threshold: float, window_s: float,
                      start: float = -math.inf, end: float = math.inf) -> float:
    """Longest contiguous span, in seconds, of windows in ``(start, end]`` exceeding ``threshold``."""
    intervals, _ = slo_intervals([(e, v) for e, v in series if start < e <= end], threshold, window_s)
    return max((b - a for a, b in intervals), default=0.0)
