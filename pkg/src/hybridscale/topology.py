"""Service graphs: per-service capacity model and call-path sampling."""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import GraphError

_WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class ServiceSpec:
    """One stateless microservice.

    ``per_pod_capacity_rps`` is the request rate that drives a pod to 100% CPU;
    it is what the autoscaler and the controller reason about. The queueing
    behaviour is set independently by ``service_time_ms`` and
    ``concurrency_per_pod``.
    """

    name: str
    service_time_ms: float
    per_pod_capacity_rps: float
    vcpu_per_pod: float = 1.0
    concurrency_per_pod: int = 1
    downstream: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "downstream", tuple(self.downstream))

    def problems(self) -> list[str]:
        out = []
        if not self.name:
            out.append("service name must be non-empty")
        if not self.service_time_ms > 0:
            out.append(f"{self.name}: service_time_ms must be > 0")
        if not self.per_pod_capacity_rps > 0:
            out.append(f"{self.name}: per_pod_capacity_rps must be > 0")
        if not self.vcpu_per_pod > 0:
            out.append(f"{self.name}: vcpu_per_pod must be > 0")
        if not (isinstance(self.concurrency_per_pod, int) and self.concurrency_per_pod >= 1):
            out.append(f"{self.name}: concurrency_per_pod must be a positive integer")
        if self.name in self.downstream:
            out.append(f"{self.name}: calls itself")
        return out


@dataclass(frozen=True)
class ServiceGraph:
    services: Mapping[str, ServiceSpec]
    entrypoints: tuple[tuple[str, float], ...]
    _cum_weights: tuple[float, ...] = field(default=(), repr=False, compare=False)
    _paths: Mapping[str, tuple[str, ...]] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def chain(cls, specs: Sequence[ServiceSpec]) -> "ServiceGraph":
        """Linear chain ``specs[0] -> specs[1] -> ...`` entered at the head."""
        linked = []
        for i, s in enumerate(specs):
            nxt = (specs[i + 1].name,) if i + 1 < len(specs) else ()
            linked.append(ServiceSpec(s.name, s.service_time_ms, s.per_pod_capacity_rps,
                                      s.vcpu_per_pod, s.concurrency_per_pod, nxt))
        return validate_graph(cls({s.name: s for s in linked}, ((linked[0].name, 1.0),)))

    def __getitem__(self, name: str) -> ServiceSpec:
        return self.services[name]

    @property
    def names(self) -> list[str]:
        return list(self.services)


def _find_cycle(services: Mapping[str, ServiceSpec]) -> list[str] | None:
    white, grey, black = 0, 1, 2
    color = dict.fromkeys(services, white)
    stack: list[str] = []

    def visit(n):
        color[n] = grey
        stack.append(n)
        for d in services[n].downstream:
            if d not in services:
                continue
            if color[d] == grey:
                return stack[stack.index(d):] + [d]
            if color[d] == white:
                found = visit(d)
                if found:
                    return found
        stack.pop()
        color[n] = black
        return None

    for n in services:
        if color[n] == white:
            found = visit(n)
            if found:
                return found
    return None


def validate_graph(graph: ServiceGraph) -> ServiceGraph:
    """Return ``graph`` with cached sampling tables, or raise listing every problem."""
    problems: list[str] = []
    for name, svc in graph.services.items():
        if name != svc.name:
            problems.append(f"service key {name!r} does not match its name {svc.name!r}")
        problems.extend(svc.problems())
        for d in svc.downstream:
            if d not in graph.services:
                problems.append(f"{name}: dangling downstream reference {d!r}")
    cycle = _find_cycle(graph.services)
    if cycle:
        problems.append("cycle: " + " -> ".join(cycle))
    if not graph.entrypoints:
        problems.append("at least one entrypoint is required")
    total = 0.0
    for name, w in graph.entrypoints:
        if name not in graph.services:
            problems.append(f"entrypoint {name!r} is not a service")
        if not w > 0:
            problems.append(f"entrypoint {name!r} weight must be positive")
        total += w
    if graph.entrypoints and abs(total - 1.0) > _WEIGHT_TOL:
        problems.append(f"entrypoint weights sum to {total}, expected 1")
    if problems:
        raise GraphError("; ".join(problems))
    cum = tuple(itertools.accumulate(w for _, w in graph.entrypoints))
    paths = {e: tuple(expand_path(graph, e)) for e, _ in graph.entrypoints}
    return ServiceGraph(dict(graph.services), tuple(graph.entrypoints), cum, paths)


def throughput_capacity(svc: ServiceSpec, ready_pods: int) -> float:
    """Maximum collective req/s the ready pods of ``svc`` sustain."""
    if ready_pods < 0:
        raise ValueError("ready_pods must be >= 0")
    return ready_pods * svc.per_pod_capacity_rps


def pod_cpu(svc: ServiceSpec, pod_rps: float) -> float:
    return min(max(pod_rps / svc.per_pod_capacity_rps, 0.0), 1.0)


def expand_path(graph: ServiceGraph, entry: str) -> list[str]:
    """Depth-first sequential call order starting at ``entry``."""
    out = []
    stack = [entry]
    while stack:
        name = stack.pop()
        out.append(name)
        stack.extend(reversed(graph.services[name].downstream))
    return out


def sample_call_path(graph: ServiceGraph, rng) -> tuple[str, ...]:
    """Pick an entrypoint by weight and return its full call sequence.

    ``rng`` is anything with a ``random()`` method returning floats in [0, 1).
    Single-entry graphs consume no randomness.
    """
    if not graph._cum_weights:
        graph = validate_graph(graph)
    cum = graph._cum_weights
    if len(cum) == 1:
        entry = graph.entrypoints[0][0]
    else:
        i = bisect.bisect_right(cum, rng.random() * cum[-1])
        entry = graph.entrypoints[min(i, len(cum) - 1)][0]
    return graph._paths[entry]
