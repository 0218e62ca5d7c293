"""Weighted VM/serverless split per service with sticky serverless routing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import InvariantViolation

VM = "vm"
SERVERLESS = "serverless"


@dataclass(frozen=True)
class RoutingWeights:
    service: str
    w_v: float = 1.0
    w_s: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.w_v <= 1.0 and 0.0 <= self.w_s <= 1.0):
            raise ValueError(f"weights out of [0, 1]: {self}")
        if self.w_v + self.w_s != 1.0:
            raise ValueError(f"weights must sum to 1: {self}")


class RoutingTable:
    """Per-service weights, swapped in as a whole on every update."""

    def __init__(self, services: Iterable[str]):
        self._w_s: dict[str, float] = {s: 0.0 for s in services}

    def update(self, weights: Mapping[str, RoutingWeights] | Iterable[RoutingWeights]):
        items = weights.values() if isinstance(weights, Mapping) else weights
        new = dict(self._w_s)
        for w in items:
            if w.service not in new:
                raise InvariantViolation(f"no routing entry for {w.service!r}")
            new[w.service] = w.w_s
        self._w_s = new

    def weights(self, svc: str) -> RoutingWeights:
        w_s = self._w_s[svc]
        return RoutingWeights(svc, 1.0 - w_s, w_s)

    def w_s(self, svc: str) -> float:
        return self._w_s[svc]

    def snapshot(self) -> dict[str, float]:
        return dict(self._w_s)


def route(table: RoutingTable, svc: str, req, rng) -> str:
    """Choose the tier for the next hop of ``req`` and update its sticky flag.

    A request that has touched serverless stays there. Otherwise it goes to
    serverless with probability ``w_s``; no random draw is consumed when the
    outcome is certain.
    """
    if req.on_serverless:
        return SERVERLESS
    try:
        w_s = table._w_s[svc]
    except KeyError:
        raise InvariantViolation(f"no routing entry for {svc!r}") from None
    if w_s <= 0.0:
        return VM
    if w_s >= 1.0 or rng.random() < w_s:
        req.on_serverless = True
        return SERVERLESS
    return VM


def propagate_stickiness(req) -> bool:
    return req.on_serverless
