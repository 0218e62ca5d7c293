import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain
from hybridscale.engine import Request, Simulation
from hybridscale.metrics import LatencyRecords, percentile_window
from hybridscale.vmtier import (POD_READY, VM_READY, CaConfig, HpaConfig, VmTier,
                                proportional_replicas)


class Recorder:
    def __init__(self):
        self.events = []
        self.delivered = set()

    def __call__(self, time, kind, payload=None):
        self.events.append((time, kind, payload))

    def of(self, kind):
        return [e for e in self.events if e[1] == kind]


def tier(replicas=1, concurrency=1, hpa=None, ca=None, services=("a",)):
    g = chain(*services, concurrency=concurrency)
    rec = Recorder()
    vm = VmTier(g, hpa or HpaConfig(), ca or CaConfig(), dict.fromkeys(services, replicas), schedule=rec)
    return vm, rec


def req(i=0):
    return Request(i, 0.0, ("a",))


def finish_boots(vm, rec, upto):
    """Deliver scheduled VM/pod readiness events up to ``upto`` in time order."""
    done = rec.delivered
    while True:
        due = sorted((e for e in rec.events if e[0] <= upto and id(e) not in done), key=lambda e: e[0])
        if not due:
            return
        for e in due:
            done.add(id(e))
            if e[1] == VM_READY:
                vm.on_vm_ready(e[2], e[0])
            elif e[1] == POD_READY:
                vm.on_pod_ready(e[2], e[0])


class TestAdmission:
    def test_idle_pods(self):
        vm, _ = tier(replicas=2)
        pod, started = vm.admit_request("a", req())
        assert started and pod.busy == 1 and not pod.queue

    def test_slot_arithmetic(self):
        vm, _ = tier(replicas=1, concurrency=4)
        outcomes = [vm.admit_request("a", req(i))[1] for i in range(5)]
        pod = vm.routable["a"][0]
        assert outcomes == [True] * 4 + [False]
        assert pod.busy == 4 and len(pod.queue) == 1

    def test_least_loaded(self):
        vm, _ = tier(replicas=2, concurrency=4)
        first = vm.admit_request("a", req(0))[0]
        second = vm.admit_request("a", req(1))[0]
        assert first is not second

    def test_release_starts_queued(self):
        vm, _ = tier(replicas=1)
        pod, _ = vm.admit_request("a", req(0))
        r1 = req(1)
        vm.admit_request("a", r1)
        assert vm.release(pod, 1.0) is r1 and pod.busy == 1

    def test_overload_diverges(self):
        # M/M/1 at twice its service rate and no scaling: waits grow without bound
        g = chain("a", service_time_ms=10)
        vm = VmTier(g, HpaConfig(), CaConfig(), {"a": 1}, autoscale=False)
        sim = Simulation(g, lambda t: 200, 200, 60.0, seed=4, vm=vm, request_timeout_s=1e6)
        sim.run()
        p95 = [v for _, v in percentile_window(LatencyRecords.from_requests(sim.requests, 1e6), 10, 0.95,
                                                key="arrival")]
        assert len(p95) == 6
        assert all(b > a for a, b in zip(p95, p95[1:]))
        assert p95[-1] > 20_000


class TestHpa:
    @pytest.mark.parametrize("current,cpu,expect", [(2, 0.5, 2), (2, 1.0, 4), (4, 0.1, 1)])
    def test_proportional_rule(self, current, cpu, expect):
        assert proportional_replicas(current, cpu, 0.5) == expect

    def test_tolerance_band(self):
        assert proportional_replicas(4, 0.54, 0.5, tolerance=0.1) == 4
        assert proportional_replicas(4, 0.56, 0.5, tolerance=0.1) == 5

    def test_scale_up_immediate(self):
        vm, rec = tier(replicas=2)
        assert vm.hpa_tick("a", 1.0, 15.0) == 4
        ready = rec.of(POD_READY)
        assert len(ready) == 2 and all(t == 15.0 + vm.hpa.pod_start_delay_s for t, _, _ in ready)
        assert vm.total_replicas("a") == 4

    def test_scale_down_waits_for_window(self):
        vm, _ = tier(replicas=4)
        assert vm.hpa_tick("a", 0.1, 15.0) == 1
        assert vm.total_replicas("a") == 4
        for t in range(30, 301, 15):
            vm.hpa_tick("a", 0.1, float(t))
        assert vm.total_replicas("a") == 4
        vm.hpa_tick("a", 0.1, 316.0)
        assert vm.total_replicas("a") == 1

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=30),
           st.integers(1, 3), st.integers(3, 8))
    def test_bounds(self, metrics, lo, hi):
        vm, rec = tier(replicas=lo, hpa=HpaConfig(min_replicas=lo, max_replicas=hi))
        for i, m in enumerate(metrics):
            now = 15.0 * (i + 1)
            finish_boots(vm, rec, now)
            desired = vm.hpa_tick("a", m, now)
            vm.ca_tick(now)
            assert lo <= desired <= hi
            assert lo <= vm.total_replicas("a") <= hi

    def test_converges_to_fixed_point(self):
        # constant 330 req/s at 100 req/s per pod and a 50% target
        vm, rec = tier(replicas=1)
        for i in range(60):
            now = 15.0 * (i + 1)
            finish_boots(vm, rec, now)
            r = vm.ready_pods("a")
            vm.hpa_tick("a", 330 / (r * 100), now)
            vm.ca_tick(now)
        history = []
        for i in range(60, 100):
            now = 15.0 * (i + 1)
            finish_boots(vm, rec, now)
            r = vm.ready_pods("a")
            history.append(r)
            vm.hpa_tick("a", 330 / (r * 100), now)
        r = history[0]
        assert set(history) == {r}
        assert proportional_replicas(r, 330 / (r * 100), 0.5, vm.hpa.tolerance) == r


class TestCa:
    def test_one_pending_pod(self):
        vm, rec = tier(replicas=4)  # one full node
        vm.hpa_tick("a", 0.625, 15.0)  # ceil(4 * 1.25) = 5
        assert len(vm.state.pending) == 1
        nodes = vm.ca_tick(20.0)
        assert len(nodes) == 1
        assert [(t, n) for t, k, n in rec.of(VM_READY)] == [(140.0, nodes[0])]

    def test_ceiling_division(self):
        vm, _ = tier(replicas=4, hpa=HpaConfig(max_replicas=50))
        vm.hpa_tick("a", 1.625, 15.0)  # ceil(4 * 3.25) = 13, nine unplaced
        assert len(vm.state.pending) == 9
        assert len(vm.ca_tick(20.0)) == 3

    def test_no_double_provisioning(self):
        vm, _ = tier(replicas=4)
        vm.hpa_tick("a", 0.625, 15.0)
        assert len(vm.ca_tick(20.0)) == 1
        vm.hpa_tick("a", 0.75, 30.0)  # ceil(4 * 1.5) = 6: one more pod, it fits on the booting VM
        assert len(vm.state.pending) == 2
        assert vm.ca_tick(30.0) == []

    def test_pods_land_on_new_vm(self):
        vm, rec = tier(replicas=4)
        vm.hpa_tick("a", 0.625, 15.0)
        vm.ca_tick(20.0)
        finish_boots(vm, rec, 200.0)
        assert vm.ready_pods("a") == 5
        pod = vm.routable["a"][-1]
        assert pod.ready_at == 140.0 + vm.hpa.pod_start_delay_s >= pod.node.ready_at

    def test_idle_node_released(self):
        vm, rec = tier(replicas=5, hpa=HpaConfig(scale_down_window_s=0))
        vm.hpa_tick("a", 0.1, 15.0)  # down to 1
        assert vm.active_nodes() == 2
        vm.ca_tick(20.0)
        vm.ca_tick(20.0 + vm.ca.scale_down_unneeded_s)
        assert vm.active_nodes() == 1

    def test_underused_node_consolidated(self):
        # two nodes at 4 and 1 pods; scaling to 3 leaves one pod on each
        vm, rec = tier(replicas=5, hpa=HpaConfig(scale_down_window_s=0))
        vm.hpa_tick("a", 0.3, 15.0)
        assert vm.total_replicas("a") == 3
        t = 20.0
        while t < 2000 and vm.active_nodes() > 1:
            vm.ca_tick(t)
            finish_boots(vm, rec, t)
            t += 10
        assert vm.active_nodes() == 1
        assert vm.ready_pods("a") == 3
        vm.check_invariants()


class TestFailure:
    def test_dead_pods_get_their_share_until_detection(self):
        vm, _ = tier(replicas=4, ca=CaConfig(pods_per_vm=1), concurrency=1000)
        vm.apply_node_failure(["vm-0", "vm-1"], 30.0)
        rng = random.Random(0)
        landed = [vm.admit_request("a", req(i), rng)[0] for i in range(4000)]
        dead_share = np.mean([p.dead for p in landed])
        assert dead_share == pytest.approx(0.5, abs=0.03)
        vm.detect_failure(["vm-0", "vm-1"], 75.0)
        assert vm.ready_pods("a") == 2
        assert not any(vm.admit_request("a", req(i), rng)[0].dead for i in range(200))

    def test_kill_nothing(self):
        vm, _ = tier(replicas=2)
        assert vm.apply_node_failure([], 1.0) == []
        assert vm.ready_pods("a") == 2 and not vm.failures

    def test_unknown_node(self):
        vm, _ = tier()
        with pytest.raises(ValueError, match="vm-9"):
            vm.apply_node_failure(["vm-9"], 1.0)

    def test_detection_after_one_second(self):
        g = chain("a", service_time_ms=10, concurrency=4)
        vm = VmTier(g, HpaConfig(min_replicas=4, max_replicas=4), CaConfig(pods_per_vm=1), {"a": 4})
        from hybridscale.engine import FailurePlan
        sim = Simulation(g, lambda t: 100, 100, 40.0, seed=3, vm=vm, failure=FailurePlan(30, ["vm-0", "vm-1"], 1.0),
                         request_timeout_s=2.0)
        sim.run()
        lost = [r.arrival_time for r in sim.requests if r.timed_out]
        assert lost and min(lost) >= 29.9 and max(lost) < 31.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 3), st.booleans()), min_size=1, max_size=25))
def test_billing_matches_node_lifetimes(steps):
    vm, rec = tier(replicas=2, hpa=HpaConfig(scale_down_window_s=0, max_replicas=30))
    now = 0.0
    for metric, kill in steps:
        now += 15.0
        finish_boots(vm, rec, now)
        vm.hpa_tick("a", metric, now)
        vm.ca_tick(now)
        if kill:
            live = [n.id for n in vm.state.nodes.values() if n.active and n.ready]
            if len(live) > 1:
                vm.apply_node_failure(live[:1], now)
                vm.detect_failure(live[:1], now)
        vm.check_invariants()
    until = now + 100
    expect = sum(((n.released_at if n.released_at is not None else until) - n.ready_at)
                 for n in vm.state.nodes.values() if n.ready)
    assert vm.node_seconds(until) == pytest.approx(expect)
