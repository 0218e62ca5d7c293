import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain
from hybridscale.engine import EventKind, EventQueue, RandomStreams, Simulation
from hybridscale.errors import InvariantViolation
from hybridscale.faastier import FaasConfig, FaasTier
from hybridscale.router import RoutingTable, RoutingWeights
from hybridscale.vmtier import CaConfig, HpaConfig, VmTier


def vm_for(graph, replicas=1, autoscale=False, **ca):
    return VmTier(graph, HpaConfig(), CaConfig(**ca), dict.fromkeys(graph.services, replicas),
                  autoscale=autoscale)


class TestQueue:
    def test_same_time_fifo(self):
        q = EventQueue()
        q.schedule(5, "A")
        q.schedule(5, "B")
        q.schedule(1, "C")
        assert [q.pop().kind for _ in range(3)] == ["C", "A", "B"]

    def test_now_before_later(self):
        q = EventQueue()
        q.schedule(1e-9, "later")
        q.schedule(0.0, "now")
        assert q.pop().kind == "now"

    def test_past_event_aborts(self):
        q = EventQueue()
        q.clock = 10
        with pytest.raises(InvariantViolation, match="before the clock"):
            q.schedule(9, "X")

    def test_run_until_empty(self):
        q = EventQueue()
        assert q.run_until(100, lambda ev: None) == 0
        assert q.clock == 100

    def test_run_until_stops_at_end(self):
        q = EventQueue()
        for t in (1, 2, 3, 50):
            q.schedule(t, "X")
        seen = []
        q.run_until(3, lambda ev: seen.append(ev.time))
        assert seen == [1, 2, 3] and q.clock == 3 and len(q) == 1

    def test_timeout_lane_merges_in_order(self):
        q = EventQueue()
        q.schedule(2, "X")
        q.schedule_timeout(1, "req")
        q.schedule_timeout(3, "req2")
        kinds = [q.pop().kind for _ in range(3)]
        assert kinds == [EventKind.REQUEST_TIMEOUT, "X", EventKind.REQUEST_TIMEOUT]

    @given(st.lists(st.floats(0, 1000, allow_nan=False), min_size=1, max_size=60))
    def test_clock_never_decreases(self, times):
        q = EventQueue()
        for t in times:
            q.schedule(t, "X")
        seen = []
        q.run_until(1000, lambda ev: seen.append((ev.time, ev.seq)))
        assert seen == sorted(seen)


def test_substreams_independent():
    a, b = RandomStreams(5), RandomStreams(5)
    a["routing"].random()
    assert a["arrivals"].random() == b["arrivals"].random()
    assert RandomStreams(5)["x"].random() != RandomStreams(6)["x"].random()


def test_single_request_lifecycle():
    # one arrival at t=0 (next would be at t=2, past the end), 50ms on an idle pod
    g = chain("a", service_time_ms=50)
    sim = Simulation(g, lambda t: 0.5, 0.5, 1.0, seed=0, vm=vm_for(g), deterministic_arrivals=True,
                     service_time_dist="deterministic")
    stats = sim.run()
    (req,) = sim.requests
    assert req.arrival_time == 0.0
    assert req.completion_time == pytest.approx(0.05)
    assert stats.arrivals == stats.completions == 1


def test_two_hop_latency_is_sum():
    g = chain("a", "b", service_time_ms=20)
    sim = Simulation(g, lambda t: 0.5, 0.5, 1.0, seed=0, vm=vm_for(g), deterministic_arrivals=True,
                     service_time_dist="deterministic")
    sim.run()
    assert sim.requests[0].latency_ms == pytest.approx(40.0)
    assert sim.requests[0].tiers == ["V", "V"]


def test_no_arrivals_zero_events():
    g = chain("a")
    sim = Simulation(g, lambda t: 0.0, 0.0, 100.0, seed=0, vm=vm_for(g))
    assert sim.run().arrivals == 0


def test_timeout_when_no_capacity():
    # all requests black-hole on a killed pod, so each times out exactly once
    g = chain("a")
    vm = vm_for(g)
    vm.apply_node_failure(["vm-0"], 0.0)
    sim = Simulation(g, lambda t: 10, 10, 5.0, seed=1, vm=vm, request_timeout_s=2.0)
    stats = sim.run()
    assert stats.arrivals > 0 and stats.timeouts == stats.arrivals and stats.completions == 0
    assert all(math.isinf(r.latency_ms) for r in sim.requests)


def _run(seed, w_s=0.0, rate=30.0, duration=30.0, faas=True, event_log=True):
    g = chain("a", "b", service_time_ms=20, capacity=50, concurrency=2)
    table = RoutingTable(g.services)
    table.update([RoutingWeights("a", 1 - w_s, w_s)])
    sim = Simulation(g, lambda t: rate, rate, duration, seed, vm=vm_for(g, replicas=1, autoscale=True),
                     faas=FaasTier(FaasConfig(prewarmed=False)) if faas else None, table=table,
                     event_log=event_log, request_timeout_s=3.0)
    sim.run()
    return sim


def test_same_seed_identical_event_log():
    a, b = _run(11, w_s=0.3), _run(11, w_s=0.3)
    assert a.log_lines == b.log_lines and a.event_log_digest() == b.event_log_digest()
    assert _run(12, w_s=0.3).event_log_digest() != a.event_log_digest()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1), st.floats(5, 200))
def test_conservation(seed, w_s, rate):
    sim = _run(seed, w_s=w_s, rate=rate, duration=10.0, event_log=False)
    s = sim.stats
    assert s.arrivals == s.completions + s.timeouts == len(sim.requests)
    for r in sim.requests:
        # resolved exactly once: completed or timed out, never both
        assert r.resolved and not (r.timed_out and r.completion_time is not None)
        # sticky: once on serverless, never back on a VM
        assert "SV" not in "".join(r.tiers)


def test_serverless_only_deployment():
    g = chain("a", "b", service_time_ms=10)
    sim = Simulation(g, lambda t: 20, 20, 5.0, seed=2, faas=FaasTier(FaasConfig()))
    stats = sim.run()
    assert stats.vm_hops == 0 and stats.serverless_hops == 2 * stats.arrivals
