"""Serverless (FaaS) tier: per-request instances, warm/cold starts, billing."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .errors import InvariantViolation


@dataclass
class FaasConfig:
    enabled: bool = True
    cold_start_ms: float = 150.0
    warm_start_ms: float = 1.0
    keep_alive_s: float = 600.0
    per_instance_concurrency: int = 1
    memory_gb: float = 1.0
    price_per_gb_s: float = 0.0000166667
    price_per_invocation: float = 0.0000002
    max_instances: int = 10000
    prewarmed: bool = True
    bill_cold_start: bool = False
    billing_granularity_ms: float = 1.0
    reap_interval_s: float = 10.0

    def problems(self) -> list[str]:
        out = []
        if not (self.cold_start_ms >= self.warm_start_ms >= 0):
            out.append("faas requires cold_start_ms >= warm_start_ms >= 0")
        for name in ("price_per_gb_s", "price_per_invocation"):
            if getattr(self, name) < 0:
                out.append(f"faas.{name} must be >= 0")
        if not self.memory_gb > 0:
            out.append("faas.memory_gb must be > 0")
        if not (isinstance(self.per_instance_concurrency, int) and self.per_instance_concurrency >= 1):
            out.append("faas.per_instance_concurrency must be a positive integer")
        if not (isinstance(self.max_instances, int) and self.max_instances >= 1):
            out.append("faas.max_instances must be a positive integer")
        if self.keep_alive_s < 0:
            out.append("faas.keep_alive_s must be >= 0")
        if not self.billing_granularity_ms > 0:
            out.append("faas.billing_granularity_ms must be > 0")
        if not self.reap_interval_s > 0:
            out.append("faas.reap_interval_s must be > 0")
        return out


@dataclass
class BillingLedger:
    invocations: int = 0
    billed_gb_seconds: float = 0.0
    per_service: dict[str, list] = field(default_factory=dict)

    def charge(self, svc: str, gb_seconds: float):
        self.invocations += 1
        self.billed_gb_seconds += gb_seconds
        entry = self.per_service.get(svc)
        if entry is None:
            entry = self.per_service[svc] = [0, 0.0]
        entry[0] += 1
        entry[1] += gb_seconds

    def to_dict(self) -> dict:
        return {
            "invocations": self.invocations,
            "billed_gb_seconds": self.billed_gb_seconds,
            "per_service": {s: {"invocations": n, "billed_gb_seconds": g}
                            for s, (n, g) in sorted(self.per_service.items())},
        }


def billing_cost(ledger: BillingLedger, config: FaasConfig) -> float:
    return (ledger.invocations * config.price_per_invocation
            + ledger.billed_gb_seconds * config.price_per_gb_s)


class Instance:
    __slots__ = ("id", "service", "active", "idle_since", "created_at")

    def __init__(self, iid: int, service: str, now: float):
        self.id = iid
        self.service = service
        self.active = 0
        self.idle_since = now
        self.created_at = now


class FaasTier:
    """Function instances per service. An instance serves
    ``per_instance_concurrency`` requests at a time and is reaped after
    ``keep_alive_s`` of idleness."""

    def __init__(self, config: FaasConfig):
        self.config = config
        self.ledger = BillingLedger()
        self._idle: dict[str, deque] = {}
        self._waiting: dict[str, deque] = {}
        self._next_id = 0
        self.live_instances = 0
        self.peak_instances = 0
        self.cold_starts = 0
        self.warm_starts = 0
        self.queued = 0

    def _bill(self, svc: str, duration_s: float, start_delay_s: float, cold: bool):
        c = self.config
        billed = duration_s + (start_delay_s if cold and c.bill_cold_start else 0.0)
        gran = c.billing_granularity_ms / 1000.0
        billed = math.ceil(billed / gran - 1e-9) * gran
        self.ledger.charge(svc, billed * c.memory_gb)

    def invoke(self, svc: str, now: float, duration_s: float, payload=None):
        """Acquire an instance for one hop lasting ``duration_s``.

        Returns ``(start_delay_s, instance)``, or None when ``max_instances``
        is exhausted; the payload is then parked until an instance frees up
        (see :meth:`release`).
        """
        c = self.config
        idle = self._idle.get(svc)
        inst = None
        cold = False
        if idle:
            inst = idle[-1]
            if inst.active + 1 >= c.per_instance_concurrency:
                idle.pop()
        elif self.live_instances < c.max_instances:
            inst = Instance(self._next_id, svc, now)
            self._next_id += 1
            self.live_instances += 1
            self.peak_instances = max(self.peak_instances, self.live_instances)
            cold = not c.prewarmed
            if c.per_instance_concurrency > 1:
                self._idle.setdefault(svc, deque()).append(inst)
        if inst is None:
            self.queued += 1
            self._waiting.setdefault(svc, deque()).append((payload, duration_s))
            return None
        inst.active += 1
        if cold:
            self.cold_starts += 1
            delay = c.cold_start_ms / 1000.0
        else:
            self.warm_starts += 1
            delay = c.warm_start_ms / 1000.0
        self._bill(svc, duration_s, delay, cold)
        return delay, inst

    def release(self, inst: Instance, now: float):
        """Return ``inst`` after a hop; hands back a parked ``(payload, duration)`` if one waits."""
        waiting = self._waiting.get(inst.service)
        if waiting:
            payload, duration = waiting.popleft()
            self.warm_starts += 1
            self._bill(inst.service, duration, 0.0, False)
            return payload, duration, self.config.warm_start_ms / 1000.0
        inst.active -= 1
        if inst.active == 0:
            inst.idle_since = now
        if inst.active + 1 == self.config.per_instance_concurrency:
            self._idle.setdefault(inst.service, deque()).append(inst)
        return None

    def reap_idle(self, now: float) -> int:
        """Destroy instances idle for at least ``keep_alive_s``; returns how many."""
        ka = self.config.keep_alive_s
        reaped = 0
        for svc, idle in self._idle.items():
            keep = deque()
            for inst in idle:
                if inst.active == 0 and now - inst.idle_since >= ka:
                    reaped += 1
                else:
                    keep.append(inst)
            self._idle[svc] = keep
        self.live_instances -= reaped
        if self.live_instances < 0:
            raise InvariantViolation("negative serverless instance count")
        return reaped

    def instances(self, svc: str | None = None) -> int:
        if svc is None:
            return self.live_instances
        return len(self._idle.get(svc, ()))

    def cost(self) -> float:
        return billing_cost(self.ledger, self.config)
