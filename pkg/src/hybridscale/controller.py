"""Spike controller: per-service load tracking, weight computation and
autoscaler metric synthesis.

Every tick the controller measures each service's request rate over the
tick window (both tiers), estimates next-window load, and routes to
serverless whatever the ready VM capacity cannot cover. It also reports the
total-load CPU equivalent to the pod autoscaler so VM scale-out still
happens while serverless masks the overload.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .router import RoutingTable, RoutingWeights
from .topology import ServiceGraph, throughput_capacity

# synthetic CPU reported when a service has no ready pods; forces scale-up
NO_PODS_SENTINEL = 10.0


@dataclass
class ControllerConfig:
    enabled: bool = True
    tick_interval_s: float = 1.0
    ewma_alpha: float | None = None
    log_decisions: bool = False

    def problems(self) -> list[str]:
        out = []
        if not self.tick_interval_s > 0:
            out.append("controller.tick_interval_s must be > 0")
        if self.ewma_alpha is not None and not (0 < self.ewma_alpha <= 1):
            out.append("controller.ewma_alpha must be in (0, 1]")
        return out


@dataclass(frozen=True)
class MetricsSnapshot:
    service: str
    t: float
    rps_t: float
    rps_prev: float
    cpu: float
    ready_pods: int


def compute_weights(capacity: float, rps_t: float, rps_prev: float, service: str = "") -> RoutingWeights:
    """VM share = ready capacity / estimated next-window load, clamped to [0, 1].

    The estimate extrapolates one step when load is rising and holds the
    current rate otherwise. Zero estimated load keeps everything on VMs.
    """
    for name, v in (("capacity", capacity), ("rps_t", rps_t), ("rps_prev", rps_prev)):
        if not (v >= 0) or math.isnan(v):
            raise ValueError(f"{name} must be >= 0, got {v}")
    delta = rps_t - rps_prev
    estimate = rps_t + delta if delta > 0 else rps_t
    if estimate == 0:
        w_v = 1.0
    else:
        w_v = min(max(capacity / estimate, 0.0), 1.0)
    return RoutingWeights(service, w_v, 1.0 - w_v)


def synthesize_autoscaler_metric(total_rps: float, ready_pods: int, per_pod_capacity: float) -> float:
    """CPU utilisation the VM pods would show if they carried the whole load."""
    if total_rps <= 0:
        return 0.0
    if ready_pods <= 0:
        return NO_PODS_SENTINEL
    return total_rps / (ready_pods * per_pod_capacity)


class Controller:
    def __init__(self, graph: ServiceGraph, table: RoutingTable, config: ControllerConfig | None = None):
        self.graph = graph
        self.table = table
        self.config = config or ControllerConfig()
        self.arrivals: dict[str, int] = dict.fromkeys(graph.services, 0)
        # None until the first tick; without history there is no trend to extrapolate
        self._prev: dict[str, float | None] = dict.fromkeys(graph.services)
        self._smoothed: dict[str, float | None] = dict.fromkeys(graph.services)
        self._load: dict[str, list[float]] = {s: [] for s in graph.services}
        self.decisions: list[tuple] = []
        self.engaged_ticks: dict[str, int] = dict.fromkeys(graph.services, 0)
        self.max_w_s: dict[str, float] = dict.fromkeys(graph.services, 0.0)

    def record_arrival(self, svc: str):
        self.arrivals[svc] += 1

    def snapshot(self, svc: str, t: float, ready_pods: int) -> MetricsSnapshot:
        rps = self.arrivals[svc] / self.config.tick_interval_s
        alpha = self.config.ewma_alpha
        if alpha is not None:
            prev_s = self._smoothed[svc]
            rps = rps if prev_s is None else alpha * rps + (1 - alpha) * prev_s
            self._smoothed[svc] = rps
        cap = self.graph[svc].per_pod_capacity_rps
        cpu = min(rps / (ready_pods * cap), 1.0) if ready_pods else 0.0
        prev = self._prev[svc]
        return MetricsSnapshot(svc, t, rps, rps if prev is None else prev, cpu, ready_pods)

    def controller_tick(self, at: float, ready_pods) -> dict[str, RoutingWeights]:
        """One control step. ``ready_pods`` maps service -> ready pod count."""
        out = {}
        for svc, spec in self.graph.services.items():
            pods = ready_pods(svc) if callable(ready_pods) else ready_pods[svc]
            snap = self.snapshot(svc, at, pods)
            capacity = throughput_capacity(spec, pods)
            w = compute_weights(capacity, snap.rps_t, snap.rps_prev, svc)
            synth = synthesize_autoscaler_metric(snap.rps_t, pods, spec.per_pod_capacity_rps)
            self._load[svc].append(snap.rps_t)
            out[svc] = w
            if w.w_s > 0:
                self.engaged_ticks[svc] += 1
                self.max_w_s[svc] = max(self.max_w_s[svc], w.w_s)
            if self.config.log_decisions:
                self.decisions.append((at, svc, snap.rps_t, snap.rps_prev, capacity, w.w_v, w.w_s, synth))
            self._prev[svc] = snap.rps_t
            self.arrivals[svc] = 0
        self.table.update(out)
        return out

    def autoscaler_metric(self, svc: str, ready_pods: int) -> float:
        """Synthetic CPU for one HPA sync: mean total load since the previous
        call spread over the pods ready now, so that ``ready_pods * metric``
        is the pod-equivalent demand the autoscaler multiplies out."""
        vals = self._load[svc]
        self._load[svc] = []
        if not vals:
            return 0.0
        return synthesize_autoscaler_metric(sum(vals) / len(vals), ready_pods,
                                            self.graph[svc].per_pod_capacity_rps)

    def decisions_csv(self) -> str:
        lines = ["time,service,rps_t,rps_prev,capacity,w_v,w_s,synth_cpu"]
        for row in self.decisions:
            t, svc, r, rp, cap, wv, ws, sc = row
            lines.append(f"{t:.3f},{svc},{r:.3f},{rp:.3f},{cap:.3f},{wv:.6f},{ws:.6f},{sc:.6f}")
        return "\n".join(lines) + "\n"
