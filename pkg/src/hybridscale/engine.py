"""Discrete-event core and request lifecycle.

Events are ``(time, seq, kind, payload)`` tuples ordered by time, ties broken
by scheduling order. Request timeouts are always ``arrival + timeout`` and
therefore arrive already sorted; they live in a FIFO lane merged with the
heap instead of inflating it.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .controller import Controller
from .errors import InvariantViolation
from .faastier import FaasTier
from .router import SERVERLESS, RoutingTable, route
from .topology import ServiceGraph, sample_call_path
from .vmtier import POD_READY, VM_READY, VmTier


class EventKind:
    REQUEST_ARRIVAL = "RequestArrival"
    HOP_START = "HopStart"
    HOP_COMPLETE = "HopComplete"
    POD_READY = POD_READY
    VM_READY = VM_READY
    INSTANCE_WARM = "InstanceWarm"
    CONTROLLER_TICK = "ControllerTick"
    HPA_TICK = "HpaTick"
    CA_TICK = "CaTick"
    NODE_FAILURE = "NodeFailure"
    INSTANCE_REAP = "InstanceReap"
    REQUEST_TIMEOUT = "RequestTimeout"


class Event(NamedTuple):
    time: float
    seq: int
    kind: str
    payload: object = None


class RandomStreams:
    """Independent named substreams derived from one run seed.

    Each name hashes into its own ``SeedSequence`` spawn key, so adding draws
    to one stream never shifts another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, random.Random] = {}

    def __getitem__(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
            rng = random.Random(int(ss.generate_state(2, dtype=np.uint64)[0]))
            self._streams[name] = rng
        return rng


class EventQueue:
    def __init__(self):
        self.clock = 0.0
        self._heap: list = []
        self._seq = 0
        self.timeouts: deque = deque()

    def schedule(self, time: float, kind: str, payload=None) -> Event:
        if not time >= self.clock:
            raise InvariantViolation(
                f"event {kind} scheduled at {time} which is before the clock {self.clock}"
            )
        ev = Event(time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def schedule_timeout(self, time: float, payload):
        if self.timeouts and time < self.timeouts[-1][0]:
            raise InvariantViolation("timeouts must be scheduled in time order")
        self.timeouts.append((time, self._seq, payload))
        self._seq += 1

    def __len__(self):
        return len(self._heap) + len(self.timeouts)

    def pop(self) -> Event | None:
        heap, tq = self._heap, self.timeouts
        if tq and (not heap or (tq[0][0], tq[0][1]) < (heap[0][0], heap[0][1])):
            t, seq, payload = tq.popleft()
            return Event(t, seq, EventKind.REQUEST_TIMEOUT, payload)
        if heap:
            return heapq.heappop(heap)
        return None

    def peek_time(self) -> float:
        heap, tq = self._heap, self.timeouts
        t = math.inf
        if heap:
            t = heap[0][0]
        if tq and tq[0][0] < t:
            t = tq[0][0]
        return t

    def run_until(self, end: float, dispatch: Callable[[Event], None]) -> int:
        """Dispatch every event with ``time <= end`` in order; leave the clock at ``end``."""
        if end < self.clock:
            raise InvariantViolation(f"run_until({end}) is before the clock {self.clock}")
        n = 0
        while self.peek_time() <= end:
            ev = self.pop()
            self.clock = ev.time
            dispatch(ev)
            n += 1
        self.clock = end
        return n


class Request:
    __slots__ = ("id", "arrival_time", "path", "hop_index", "on_serverless",
                 "completion_time", "timed_out", "tiers", "entry")

    def __init__(self, rid: int, arrival_time: float, path: tuple[str, ...]):
        self.id = rid
        self.arrival_time = arrival_time
        self.path = path
        self.hop_index = 0
        self.on_serverless = False
        self.completion_time: float | None = None
        self.timed_out = False
        self.tiers: list[str] = []
        self.entry = path[0]

    @property
    def resolved(self) -> bool:
        return self.timed_out or self.completion_time is not None

    @property
    def latency_ms(self) -> float:
        if self.completion_time is None:
            return math.inf
        return (self.completion_time - self.arrival_time) * 1000.0

    def __repr__(self):
        return f"Request({self.id}, t={self.arrival_time:.3f}, hop={self.hop_index}/{len(self.path)})"


@dataclass
class RunStats:
    arrivals: int = 0
    completions: int = 0
    timeouts: int = 0
    events: int = 0
    end_time: float = 0.0
    serverless_hops: int = 0
    vm_hops: int = 0

    def conserved(self) -> bool:
        return self.arrivals == self.completions + self.timeouts


@dataclass
class FailurePlan:
    at: float
    node_ids: list[str]
    detection_delay_s: float


@dataclass
class Simulation:
    """One run: arrivals from ``rate_fn`` over ``[0, duration]`` then drain.

    ``vm`` or ``faas`` may be None (serverless-only / VM-only deployments).
    ``controller`` None means the routing table is never touched after setup.
    """

    graph: ServiceGraph
    rate_fn: Callable[[float], float]
    max_rate: float
    duration: float
    seed: int
    vm: VmTier | None = None
    faas: FaasTier | None = None
    table: RoutingTable | None = None
    controller: Controller | None = None
    controller_interval_s: float = 1.0
    hpa_interval_s: float = 15.0
    ca_interval_s: float = 10.0
    request_timeout_s: float = 10.0
    deterministic_arrivals: bool = False
    service_time_dist: str = "exponential"
    failure: FailurePlan | None = None
    # per-entrypoint rates; when set, each arrival's entry is drawn in
    # proportion to the entry rates at its arrival time
    entry_rate_fns: dict[str, Callable[[float], float]] | None = None
    event_log: bool = False
    keep_requests: bool = True
    on_request_done: Callable | None = None
    queue: EventQueue = field(default_factory=EventQueue)

    def __post_init__(self):
        self.rng = RandomStreams(self.seed)
        self.stats = RunStats()
        self.requests: list[Request] = []
        self.log_lines: list[str] = []
        self._log_hash = hashlib.sha256()
        self._next_id = 0
        if self.table is None:
            self.table = RoutingTable(self.graph.services)
        if self.vm is not None:
            self.vm._schedule = self.queue.schedule
        self._svc_mean = {s: spec.service_time_ms / 1000.0 for s, spec in self.graph.services.items()}
        self._handlers = {
            EventKind.REQUEST_ARRIVAL: self._on_arrival,
            EventKind.HOP_COMPLETE: self._on_hop_complete,
            EventKind.HOP_START: self._on_hop_start,
            EventKind.REQUEST_TIMEOUT: self._on_timeout,
            EventKind.POD_READY: self._on_pod_ready,
            EventKind.VM_READY: self._on_vm_ready,
            EventKind.CONTROLLER_TICK: self._on_controller_tick,
            EventKind.HPA_TICK: self._on_hpa_tick,
            EventKind.CA_TICK: self._on_ca_tick,
            EventKind.NODE_FAILURE: self._on_node_failure,
            EventKind.INSTANCE_REAP: self._on_reap,
        }
        self._arrival_rng = self.rng["arrivals"]
        self._service_rng = self.rng["service_times"]
        self._routing_rng = self.rng["routing"]
        self._path_rng = self.rng["paths"]
        self._lb_rng = self.rng["load_balancer"]
        self._outstanding = 0

    # -- setup ------------------------------------------------------------

    def _prime(self):
        q = self.queue
        first = self._next_arrival(0.0, first=True)
        if first is not None:
            q.schedule(first, EventKind.REQUEST_ARRIVAL)
        if self.controller is not None:
            q.schedule(self.controller_interval_s, EventKind.CONTROLLER_TICK)
        if self.vm is not None and self.vm.autoscale:
            q.schedule(self.hpa_interval_s, EventKind.HPA_TICK)
            q.schedule(self.ca_interval_s, EventKind.CA_TICK)
        if self.faas is not None and self.faas.config.keep_alive_s > 0 and not self.faas.config.prewarmed:
            q.schedule(self.faas.config.reap_interval_s, EventKind.INSTANCE_REAP)
        if self.failure is not None and self.failure.node_ids:
            q.schedule(self.failure.at, EventKind.NODE_FAILURE, ("kill", tuple(self.failure.node_ids)))
            q.schedule(self.failure.at + self.failure.detection_delay_s, EventKind.NODE_FAILURE,
                       ("detect", tuple(self.failure.node_ids)))

    def _next_arrival(self, t: float, first: bool = False) -> float | None:
        if self.deterministic_arrivals:
            while t <= self.duration:
                r = self.rate_fn(t)
                if r > 0:
                    nxt = t if first else t + 1.0 / r
                    return nxt if nxt <= self.duration else None
                t += 1.0
                first = True
            return None
        lam = self.max_rate
        if lam <= 0:
            return None
        rng = self._arrival_rng
        # thinning of a homogeneous process at the peak rate
        while True:
            t += rng.expovariate(lam)
            if t > self.duration:
                return None
            if rng.random() * lam <= self.rate_fn(t):
                return t

    # -- main loop --------------------------------------------------------

    def run(self) -> RunStats:
        self._prime()
        log = self.event_log
        handlers = self._handlers
        q = self.queue
        lines = self.log_lines
        hasher = self._log_hash
        n = 0
        pop = q.pop
        while True:
            ev = pop()
            if ev is None:
                break
            if ev.time > self.duration and self._outstanding == 0 and ev.kind != EventKind.REQUEST_ARRIVAL:
                # drained: nothing left but periodic housekeeping
                break
            q.clock = ev.time
            if ev.kind == EventKind.REQUEST_TIMEOUT and ev.payload.resolved:
                continue
            handlers[ev.kind](ev)
            n += 1
            if log:
                line = f"{ev.time:.6f} {ev.kind} {_summarize(ev.payload)}"
                lines.append(line)
                hasher.update(line.encode())
                hasher.update(b"\n")
        self.stats.events = n
        self.stats.end_time = q.clock
        if not self.stats.conserved():
            raise InvariantViolation(
                f"conservation violated: {self.stats.arrivals} arrivals, "
                f"{self.stats.completions} completions, {self.stats.timeouts} timeouts"
            )
        return self.stats

    def event_log_digest(self) -> str:
        return self._log_hash.hexdigest()

    # -- request lifecycle ------------------------------------------------

    def _service_time(self, svc: str) -> float:
        mean = self._svc_mean[svc]
        if self.service_time_dist == "deterministic":
            return mean
        return self._service_rng.expovariate(1.0 / mean)

    def _on_arrival(self, ev: Event):
        now = ev.time
        if self.entry_rate_fns:
            path = self._entry_path(now)
        else:
            path = sample_call_path(self.graph, self._path_rng)
        req = Request(self._next_id, now, path)
        self._next_id += 1
        self.stats.arrivals += 1
        self._outstanding += 1
        if self.keep_requests:
            self.requests.append(req)
        self.queue.schedule_timeout(now + self.request_timeout_s, req)
        self._begin_hop(req, now)
        nxt = self._next_arrival(now)
        if nxt is not None:
            self.queue.schedule(nxt, EventKind.REQUEST_ARRIVAL)

    def _entry_path(self, now: float) -> tuple[str, ...]:
        rates = [(e, fn(now)) for e, fn in self.entry_rate_fns.items()]
        total = sum(r for _, r in rates)
        u = self._path_rng.random() * total
        entry = rates[-1][0]
        for e, r in rates:
            if u < r:
                entry = e
                break
            u -= r
        return self.graph._paths[entry]

    def _begin_hop(self, req: Request, now: float):
        svc = req.path[req.hop_index]
        if self.controller is not None:
            self.controller.arrivals[svc] += 1
        if self.vm is None:
            tier = SERVERLESS
            req.on_serverless = True
        else:
            tier = route(self.table, svc, req, self._routing_rng)
        if tier == SERVERLESS:
            req.tiers.append("S")
            self.stats.serverless_hops += 1
            duration = self._service_time(svc)
            got = self.faas.invoke(svc, now, duration, req)
            if got is not None:
                delay, inst = got
                self.queue.schedule(now + delay + duration, EventKind.HOP_COMPLETE, (req, None, inst))
            return
        req.tiers.append("V")
        self.stats.vm_hops += 1
        pod, started = self.vm.admit_request(svc, req, self._lb_rng)
        if started:
            self.queue.schedule(now + self._service_time(svc), EventKind.HOP_COMPLETE, (req, pod, None))

    def _on_hop_start(self, ev: Event):
        req, inst, duration = ev.payload
        self.queue.schedule(ev.time + duration, EventKind.HOP_COMPLETE, (req, None, inst))

    def _on_hop_complete(self, ev: Event):
        now = ev.time
        req, pod, inst = ev.payload
        if pod is not None:
            if pod.dead:
                return
            nxt = self.vm.release(pod, now)
            if nxt is not None:
                self.queue.schedule(now + self._service_time(pod.service), EventKind.HOP_COMPLETE,
                                    (nxt, pod, None))
        else:
            parked = self.faas.release(inst, now)
            if parked is not None:
                preq, duration, delay = parked
                self.queue.schedule(now + delay, EventKind.HOP_START, (preq, inst, duration))
        if req.timed_out:
            return
        req.hop_index += 1
        if req.hop_index == len(req.path):
            req.completion_time = now
            self.stats.completions += 1
            self._outstanding -= 1
            if self.on_request_done is not None:
                self.on_request_done(req)
        else:
            self._begin_hop(req, now)

    def _on_timeout(self, ev: Event):
        req = ev.payload
        req.timed_out = True
        self.stats.timeouts += 1
        self._outstanding -= 1
        if self.on_request_done is not None:
            self.on_request_done(req)

    # -- control plane ----------------------------------------------------

    def _on_pod_ready(self, ev: Event):
        now = ev.time
        pod = ev.payload
        for req in self.vm.on_pod_ready(pod, now):
            self.queue.schedule(now + self._service_time(pod.service), EventKind.HOP_COMPLETE,
                                (req, pod, None))

    def _on_vm_ready(self, ev: Event):
        self.vm.on_vm_ready(ev.payload, ev.time)

    def _on_controller_tick(self, ev: Event):
        self.controller.controller_tick(ev.time, self.vm.ready_pods)
        self.queue.schedule(ev.time + self.controller_interval_s, EventKind.CONTROLLER_TICK)

    def _on_hpa_tick(self, ev: Event):
        now = ev.time
        vm = self.vm
        for svc in self.graph.services:
            if self.controller is not None:
                metric = self.controller.autoscaler_metric(svc, vm.ready_pods(svc))
            else:
                metric = vm.autoscaler_input(svc, self.hpa_interval_s)
            vm.hpa_tick(svc, metric, now)
        vm.reset_window()
        self.queue.schedule(now + self.hpa_interval_s, EventKind.HPA_TICK)

    def _on_ca_tick(self, ev: Event):
        self.vm.ca_tick(ev.time)
        self.queue.schedule(ev.time + self.ca_interval_s, EventKind.CA_TICK)

    def _on_node_failure(self, ev: Event):
        phase, ids = ev.payload
        if phase == "kill":
            self.vm.apply_node_failure(list(ids), ev.time)
        else:
            self.vm.detect_failure(list(ids), ev.time)

    def _on_reap(self, ev: Event):
        self.faas.reap_idle(ev.time)
        self.queue.schedule(ev.time + self.faas.config.reap_interval_s, EventKind.INSTANCE_REAP)


def _summarize(payload) -> str:
    if payload is None:
        return "-"
    if isinstance(payload, Request):
        return f"req={payload.id}"
    if isinstance(payload, tuple):
        if payload and isinstance(payload[0], Request):
            req = payload[0]
            where = payload[1].id if payload[1] is not None and hasattr(payload[1], "id") else "faas"
            return f"req={req.id} hop={req.hop_index} at={where}"
        return " ".join(str(p) for p in payload)
    return getattr(payload, "id", str(payload))
