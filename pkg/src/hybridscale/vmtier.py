"""VM cluster model: pods, the horizontal pod autoscaler and the cluster autoscaler.

The tier owns cluster state only. Time advances through the engine, which
hands the tier a ``schedule(time, kind, payload)`` callback for the events it
needs (pod and VM readiness).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .errors import InvariantViolation
from .topology import ServiceGraph

# fired by the tier, dispatched by the engine
POD_READY = "PodReady"
VM_READY = "VmReady"


@dataclass
class HpaConfig:
    cpu_target: float = 0.50
    sync_period_s: float = 15.0
    min_replicas: int = 1
    max_replicas: int = 100
    pod_start_delay_s: float = 5.0
    # Kubernetes skips scaling while |metric/target - 1| <= tolerance
    tolerance: float = 0.1
    scale_down_window_s: float = 300.0
    # second metric: per-pod request rate against the rate that corresponds to
    # cpu_target; unlike CPU it does not saturate, and the larger proposal wins
    rps_metric: bool = True

    def problems(self) -> list[str]:
        out = []
        if not (0 < self.cpu_target <= 1):
            out.append(f"hpa.cpu_target must be in (0, 1], got {self.cpu_target}")
        if not self.sync_period_s > 0:
            out.append("hpa.sync_period_s must be > 0")
        if not (1 <= self.min_replicas <= self.max_replicas):
            out.append("hpa requires 1 <= min_replicas <= max_replicas")
        if self.pod_start_delay_s < 0:
            out.append("hpa.pod_start_delay_s must be >= 0")
        if not (0 <= self.tolerance < 1):
            out.append("hpa.tolerance must be in [0, 1)")
        if self.scale_down_window_s < 0:
            out.append("hpa.scale_down_window_s must be >= 0")
        return out


@dataclass
class CaConfig:
    scan_interval_s: float = 10.0
    vm_boot_delay_s: float = 120.0
    pods_per_vm: int = 4
    vm_hourly_cost: float = 0.1670
    vcpu_per_vm: int = 4
    # empty nodes are released after this long (cluster-autoscaler scale-down-unneeded-time)
    scale_down_unneeded_s: float = 600.0
    # nodes below this slot utilisation for scale_down_unneeded_s are drained if their pods fit elsewhere
    scale_down_utilization: float = 0.5
    max_nodes: int = 1000

    def problems(self) -> list[str]:
        out = []
        for name in ("scan_interval_s", "vm_boot_delay_s", "vm_hourly_cost"):
            if not getattr(self, name) > 0:
                out.append(f"ca.{name} must be > 0")
        for name in ("pods_per_vm", "vcpu_per_vm", "max_nodes"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                out.append(f"ca.{name} must be a positive integer")
        if self.scale_down_unneeded_s < 0:
            out.append("ca.scale_down_unneeded_s must be >= 0")
        if not 0 <= self.scale_down_utilization <= 1:
            out.append("ca.scale_down_utilization must be in [0, 1]")
        return out


class Pod:
    __slots__ = ("id", "service", "node", "concurrency", "ready", "ready_at", "busy",
                 "queue", "dead", "draining", "removed", "arrivals", "evicted", "replaces")

    def __init__(self, pid: str, service: str, concurrency: int):
        self.id = pid
        self.service = service
        self.node: VmNode | None = None
        self.concurrency = concurrency
        self.ready = False
        self.ready_at = math.nan
        self.busy = 0
        self.queue: deque = deque()
        self.dead = False
        self.draining = False
        # evicted: a replacement is starting elsewhere; the pod serves until it is ready
        self.evicted = False
        self.replaces: Pod | None = None
        self.removed = False
        self.arrivals = 0

    @property
    def in_flight(self) -> int:
        return self.busy

    @property
    def load(self) -> int:
        return self.busy + len(self.queue)

    def __repr__(self):
        return f"Pod({self.id}, busy={self.busy}, queued={len(self.queue)})"


class VmNode:
    __slots__ = ("id", "ready", "ready_at", "requested_at", "failed", "released_at", "pods", "idle_since",
                 "drain", "underused_since")

    def __init__(self, nid: str, requested_at: float):
        self.id = nid
        self.ready = False
        self.ready_at = math.nan
        self.requested_at = requested_at
        self.failed = False
        self.released_at: float | None = None
        self.pods: list[Pod] = []
        self.idle_since: float | None = None
        self.drain = False
        self.underused_since: float | None = None

    @property
    def active(self) -> bool:
        return not self.failed and self.released_at is None

    def __repr__(self):
        return f"VmNode({self.id}, ready={self.ready}, pods={len(self.pods)})"


@dataclass
class ClusterState:
    nodes: dict[str, VmNode] = field(default_factory=dict)
    pods: dict[str, list[Pod]] = field(default_factory=dict)
    pending: list[Pod] = field(default_factory=list)

    @property
    def pending_vm_requests(self) -> int:
        return sum(1 for n in self.nodes.values() if n.active and not n.ready)


def proportional_replicas(current: int, metric: float, target: float, tolerance: float = 0.0) -> int:
    """``ceil(current * metric / target)``, unchanged inside the tolerance band."""
    ratio = metric / target
    if abs(ratio - 1.0) <= tolerance:
        return current
    return math.ceil(current * ratio - 1e-9)


class VmTier:
    """Pods on VMs with two-level autoscaling and failure injection."""

    def __init__(self, graph: ServiceGraph, hpa: HpaConfig, ca: CaConfig,
                 initial_replicas: dict[str, int], schedule: Callable | None = None,
                 autoscale: bool = True):
        self.graph = graph
        self.hpa = hpa
        self.ca = ca
        self.autoscale = autoscale
        self.state = ClusterState()
        self._schedule = schedule or (lambda *a: None)
        self._pod_seq = 0
        self._node_seq = 0
        self.routable: dict[str, list[Pod]] = {s: [] for s in graph.services}
        self.backlog: dict[str, deque] = {s: deque() for s in graph.services}
        self._dead_routable: dict[str, int] = dict.fromkeys(graph.services, 0)
        self._recommendations: dict[str, deque] = {s: deque() for s in graph.services}
        self.failures: list[tuple[float, list[str]]] = []
        for s in graph.services:
            self.state.pods[s] = []
        self._bootstrap(initial_replicas)

    # -- construction -----------------------------------------------------

    def _new_node(self, now: float) -> VmNode:
        node = VmNode(f"vm-{self._node_seq}", now)
        self._node_seq += 1
        self.state.nodes[node.id] = node
        return node

    def _new_pod(self, svc: str) -> Pod:
        pod = Pod(f"{svc}-{self._pod_seq}", svc, self.graph[svc].concurrency_per_pod)
        self._pod_seq += 1
        self.state.pods[svc].append(pod)
        return pod

    def _bootstrap(self, initial_replicas: dict[str, int]):
        node = None
        for svc in self.graph.services:
            for _ in range(initial_replicas.get(svc, self.hpa.min_replicas)):
                if node is None or len(node.pods) >= self.ca.pods_per_vm:
                    node = self._new_node(0.0)
                    node.ready = True
                    node.ready_at = 0.0
                pod = self._new_pod(svc)
                pod.node = node
                node.pods.append(pod)
                pod.ready = True
                pod.ready_at = 0.0
                self.routable[svc].append(pod)
            self._recommendations[svc].append((0.0, len(self.state.pods[svc])))

    # -- request path -----------------------------------------------------

    def admit_request(self, svc: str, req, rng=None):
        """Place ``req`` on a pod of ``svc``.

        Returns ``(pod, started)``; ``started`` is False when the request was
        queued. ``pod`` is None if the service has no routable pod, in which
        case the request waits in a service backlog.
        """
        pods = self.routable[svc]
        if not pods:
            self.backlog[svc].append(req)
            return None, False
        n_dead = self._dead_routable[svc]
        if n_dead and rng is not None and rng.random() * len(pods) < n_dead:
            # the balancer still believes in the dead pods and sends them their share
            dead = [p for p in pods if p.dead]
            pod = dead[int(rng.random() * len(dead))]
        else:
            pod = None
            best = None
            for p in pods:
                if p.dead:
                    continue
                load = p.busy + len(p.queue)
                if best is None or load < best:
                    pod, best = p, load
                    if load == 0:
                        break
            if pod is None:
                pod = pods[0]
        pod.arrivals += 1
        if not pod.dead and pod.busy < pod.concurrency:
            pod.busy += 1
            return pod, True
        pod.queue.append(req)
        return pod, False

    def release(self, pod: Pod, now: float):
        """Free one slot on ``pod``; return the next queued request to start, if any."""
        pod.busy -= 1
        queue = pod.queue
        while queue:
            nxt = queue.popleft()
            if nxt.resolved:
                continue
            pod.busy += 1
            return nxt
        if pod.draining and pod.busy == 0:
            self._delete_pod(pod, now)
        return None

    # -- metrics ----------------------------------------------------------

    def ready_pods(self, svc: str) -> int:
        """Pods the control plane believes are serving (includes undetected dead pods)."""
        return len(self.routable[svc])

    def total_replicas(self, svc: str) -> int:
        return sum(1 for p in self.state.pods[svc] if not (p.draining or p.removed or p.evicted))

    def observed_cpu(self, svc: str, window_s: float, clamp: bool = True) -> float:
        """Mean per-pod CPU over the window, as the metrics pipeline reports it.

        With ``clamp=False`` this is the request-rate metric expressed in the
        same units (rate / per-pod capacity), which can exceed 1.
        """
        cap = self.graph[svc].per_pod_capacity_rps
        live = [p for p in self.routable[svc] if not p.dead]
        if not live:
            return 0.0
        total = 0.0
        for p in live:
            u = p.arrivals / window_s / cap
            total += min(u, 1.0) if clamp else u
        return total / len(live)

    def autoscaler_input(self, svc: str, window_s: float) -> float:
        """Metric the HPA acts on: CPU, or the request-rate ratio when that is larger."""
        if self.hpa.rps_metric:
            return self.observed_cpu(svc, window_s, clamp=False)
        return self.observed_cpu(svc, window_s)

    def reset_window(self):
        for pods in self.state.pods.values():
            for p in pods:
                p.arrivals = 0

    # -- horizontal pod autoscaler ---------------------------------------

    def hpa_tick(self, svc: str, observed_cpu: float, now: float) -> int:
        """Apply one HPA evaluation for ``svc`` and return the raw desired count."""
        h = self.hpa
        current = max(self.ready_pods(svc), 1)
        desired = proportional_replicas(current, observed_cpu, h.cpu_target, h.tolerance)
        desired = min(max(desired, h.min_replicas), h.max_replicas)
        recs = self._recommendations[svc]
        recs.append((now, desired))
        while recs and recs[0][0] < now - h.scale_down_window_s:
            recs.popleft()
        total = self.total_replicas(svc)
        if desired > total:
            self._scale_up(svc, desired - total, now)
        else:
            stabilized = max(d for _, d in recs)
            if stabilized < total:
                self._scale_down(svc, total - stabilized, now)
        return desired

    def _free_slot_node(self) -> VmNode | None:
        for node in self.state.nodes.values():
            if node.ready and node.active and not node.drain and len(node.pods) < self.ca.pods_per_vm:
                return node
        return None

    def _place(self, pod: Pod, node: VmNode, now: float):
        pod.node = node
        node.pods.append(pod)
        node.idle_since = None
        pod.ready_at = now + self.hpa.pod_start_delay_s
        self._schedule(pod.ready_at, POD_READY, pod)

    def _scale_up(self, svc: str, count: int, now: float):
        for _ in range(count):
            pod = self._new_pod(svc)
            node = self._free_slot_node()
            if node is None:
                self.state.pending.append(pod)
            else:
                self._place(pod, node, now)

    def _scale_down(self, svc: str, count: int, now: float):
        pods = [p for p in self.state.pods[svc] if not (p.draining or p.removed or p.evicted)]
        unplaced = [p for p in pods if p.node is None]
        starting = [p for p in pods if p.node is not None and not p.ready]
        ready = [p for p in pods if p.ready]
        # emptiest (then newest) node first so whole VMs can be released
        ready.sort(key=lambda p: (len(p.node.pods), -int(p.node.id.split("-")[1])))
        for pod in (unplaced[::-1] + starting[::-1] + ready)[:count]:
            if pod.node is None:
                self.state.pending.remove(pod)
                pod.removed = True
                self.state.pods[svc].remove(pod)
            elif not pod.ready:
                self._delete_pod(pod, now)
            else:
                self._retire(pod, now)

    def _unroute(self, pod: Pod):
        lst = self.routable[pod.service]
        if pod in lst:
            lst.remove(pod)
            if pod.dead:
                self._dead_routable[pod.service] -= 1

    def _retire(self, pod: Pod, now: float):
        pod.draining = True
        self._unroute(pod)
        if pod.busy == 0 and not pod.queue:
            self._delete_pod(pod, now)

    def _delete_pod(self, pod: Pod, now: float):
        pod.removed = True
        self._unroute(pod)
        old = pod.replaces
        if old is not None and not pod.ready and not old.removed:
            # replacement cancelled before it started; the original stays put
            old.evicted = False
            if old.node is not None:
                old.node.drain = False
        if pod in self.state.pods[pod.service]:
            self.state.pods[pod.service].remove(pod)
        node = pod.node
        if node is not None and pod in node.pods:
            node.pods.remove(pod)
            if not node.pods:
                node.idle_since = now
                if node.drain and node.active:
                    node.released_at = now

    def on_pod_ready(self, pod: Pod, now: float) -> list:
        """Mark ``pod`` ready; returns backlog requests that should start on it."""
        if pod.ready or pod.removed or pod.dead or (pod.node is not None and not pod.node.active):
            return []
        pod.ready = True
        self.routable[pod.service].append(pod)
        old = pod.replaces
        if old is not None and not old.removed:
            self._retire(old, now)
        started = []
        backlog = self.backlog[pod.service]
        while backlog:
            req = backlog.popleft()
            if req.resolved:
                continue
            pod.arrivals += 1
            if pod.busy < pod.concurrency:
                pod.busy += 1
                started.append(req)
            else:
                pod.queue.append(req)
        return started

    # -- cluster autoscaler ----------------------------------------------

    def ca_tick(self, now: float) -> list[VmNode]:
        """Request VMs for unplaceable pods and release long-idle empty nodes."""
        st = self.state
        for pod in list(st.pending):
            node = self._free_slot_node()
            if node is None:
                break
            st.pending.remove(pod)
            self._place(pod, node, now)
        booting_slots = sum(self.ca.pods_per_vm - len(n.pods)
                            for n in st.nodes.values() if n.active and not n.ready)
        unfit = len(st.pending) - booting_slots
        new_nodes = []
        if unfit > 0:
            active = sum(1 for n in st.nodes.values() if n.active)
            want = min(math.ceil(unfit / self.ca.pods_per_vm), self.ca.max_nodes - active)
            for _ in range(max(want, 0)):
                node = self._new_node(now)
                self._schedule(now + self.ca.vm_boot_delay_s, VM_READY, node)
                new_nodes.append(node)
        self._consolidate(now)
        for node in st.nodes.values():
            if (node.ready and node.active and not node.pods and node.idle_since is not None
                    and now - node.idle_since >= self.ca.scale_down_unneeded_s):
                node.released_at = now
        return new_nodes

    def _consolidate(self, now: float):
        """Drain nodes that stayed under-utilised and whose pods fit on other nodes.

        Each pod gets a replacement on another node first and retires once the
        replacement is ready, so serving capacity never dips.
        """
        ppv = self.ca.pods_per_vm
        nodes = self.state.nodes.values()
        for node in nodes:
            if not (node.ready and node.active and node.pods) or node.drain:
                continue
            if len(node.pods) / ppv >= self.ca.scale_down_utilization:
                node.underused_since = None
                continue
            if node.underused_since is None:
                node.underused_since = now
            if now - node.underused_since < self.ca.scale_down_unneeded_s:
                continue
            pods = list(node.pods)
            if any(not p.ready or p.draining or p.evicted or p.dead for p in pods):
                continue
            # only occupied nodes take the pods; empty ones are about to be released
            targets = sorted((n for n in nodes if n is not node and n.ready and n.active
                              and not n.drain and n.pods and len(n.pods) < ppv),
                             key=lambda n: -len(n.pods))
            if sum(ppv - len(n.pods) for n in targets) < len(pods):
                continue
            node.drain = True
            for old in pods:
                old.evicted = True
                repl = self._new_pod(old.service)
                repl.replaces = old
                dest = next(n for n in targets if len(n.pods) < ppv)
                self._place(repl, dest, now)

    def on_vm_ready(self, node: VmNode, now: float):
        if node.ready or not node.active:
            return
        node.ready = True
        node.ready_at = now
        node.idle_since = now
        while self.state.pending and len(node.pods) < self.ca.pods_per_vm:
            self._place(self.state.pending.pop(0), node, now)

    # -- failures ---------------------------------------------------------

    def apply_node_failure(self, node_ids: list[str], now: float) -> list:
        """Kill nodes at ``now``. Their pods stay routable until detection.

        Returns requests that were in service on the killed pods.
        """
        unknown = [n for n in node_ids if n not in self.state.nodes]
        if unknown:
            raise ValueError(f"unknown node(s): {unknown}")
        lost = []
        for nid in node_ids:
            node = self.state.nodes[nid]
            if not node.active:
                continue
            node.failed = True
            node.released_at = now
            for pod in node.pods:
                pod.dead = True
                if pod in self.routable[pod.service]:
                    self._dead_routable[pod.service] += 1
                lost.extend(pod.queue)
        if node_ids:
            self.failures.append((now, list(node_ids)))
        return lost

    def detect_failure(self, node_ids: list[str], now: float):
        """The control plane notices the failed nodes and drops their pods."""
        for nid in node_ids:
            node = self.state.nodes.get(nid)
            if node is None:
                continue
            for pod in list(node.pods):
                self._delete_pod(pod, now)
                pod.queue.clear()

    # -- accounting -------------------------------------------------------

    def node_seconds(self, until: float) -> float:
        """VM-seconds billed in ``[0, until]``; a node is billed from ready to release."""
        total = 0.0
        for node in self.state.nodes.values():
            if not node.ready or node.ready_at >= until:
                continue
            end = until if node.released_at is None else min(node.released_at, until)
            total += max(end - node.ready_at, 0.0)
        return total

    def active_nodes(self) -> int:
        return sum(1 for n in self.state.nodes.values() if n.active and n.ready)

    def check_invariants(self):
        ppv = self.ca.pods_per_vm
        for node in self.state.nodes.values():
            if len(node.pods) > ppv:
                raise InvariantViolation(f"{node.id} hosts {len(node.pods)} pods > {ppv}")
        for svc, pods in self.routable.items():
            for p in pods:
                if p.node is None or not p.node.ready:
                    raise InvariantViolation(f"routable pod {p.id} lacks a ready node")
                if not p.dead and not p.node.active:
                    raise InvariantViolation(f"live pod {p.id} on inactive node")
                if p.ready_at < p.node.ready_at:
                    raise InvariantViolation(f"pod {p.id} ready before its node")
                if p.busy > p.concurrency:
                    raise InvariantViolation(f"pod {p.id} exceeds its concurrency")
