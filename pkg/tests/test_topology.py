import random
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain
from hybridscale.errors import GraphError
from hybridscale.topology import (ServiceGraph, ServiceSpec, pod_cpu, sample_call_path,
                                  throughput_capacity, validate_graph)


def spec(name, *down, cap=100.0):
    return ServiceSpec(name, 10.0, cap, downstream=down)


def two_chains(view=0.7, post=0.3):
    services = {s.name: s for s in [spec("view", "view-db"), spec("view-db"),
                                    spec("post", "post-db"), spec("post-db")]}
    entries = tuple((e, w) for e, w in (("view", view), ("post", post)) if w > 0)
    return validate_graph(ServiceGraph(services, entries))


def test_linear_chain_valid():
    g = chain("a", "b", "c")
    assert sample_call_path(g, random.Random(0)) == ("a", "b", "c")


def test_cycle_named():
    g = ServiceGraph({"a": spec("a", "b"), "b": spec("b", "a")}, (("a", 1.0),))
    with pytest.raises(GraphError, match="cycle: (a -> b -> a|b -> a -> b)"):
        validate_graph(g)


def test_every_problem_reported():
    g = ServiceGraph({"a": spec("a", "ghost"), "b": ServiceSpec("b", -1, 0)}, (("a", 0.5),))
    with pytest.raises(GraphError) as exc:
        validate_graph(g)
    msg = str(exc.value)
    for frag in ("dangling downstream reference 'ghost'", "service_time_ms", "per_pod_capacity_rps",
                 "sum to 0.5"):
        assert frag in msg


def test_view_post_split_valid():
    g = two_chains()
    rng = random.Random(3)
    counts = Counter(sample_call_path(g, rng)[0] for _ in range(20000))
    assert counts["view"] / 20000 == pytest.approx(0.7, abs=0.015)


def test_view_only_never_touches_post():
    g = two_chains(view=1.0, post=0)
    rng = random.Random(1)
    for _ in range(1000):
        assert sample_call_path(g, rng) == ("view", "view-db")


def test_same_seed_same_paths():
    g = two_chains()
    a = [sample_call_path(g, random.Random(7)) for _ in range(50)]
    b = [sample_call_path(g, random.Random(7)) for _ in range(50)]
    assert a == b


def test_fanout_is_depth_first():
    services = {s.name: s for s in [spec("a", "b", "d"), spec("b", "c"), spec("c"), spec("d")]}
    g = validate_graph(ServiceGraph(services, (("a", 1.0),)))
    assert sample_call_path(g, random.Random(0)) == ("a", "b", "c", "d")


@pytest.mark.parametrize("cap,pods,expect", [(100, 3, 300), (100, 0, 0), (150, 4, 600)])
def test_capacity(cap, pods, expect):
    assert throughput_capacity(spec("s", cap=cap), pods) == expect


@given(st.floats(0.1, 1e4), st.integers(0, 1000), st.integers(0, 1000))
def test_capacity_linear(cap, a, b):
    s = spec("s", cap=cap)
    assert throughput_capacity(s, a + b) == pytest.approx(throughput_capacity(s, a) + throughput_capacity(s, b))


def test_pod_cpu_clamped():
    s = spec("s", cap=100)
    assert pod_cpu(s, 50) == 0.5
    assert pod_cpu(s, 250) == 1.0


@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_paths_terminate_inside_graph(n, seed):
    rng = random.Random(seed)
    names = [f"s{i}" for i in range(n)]
    services = {}
    for i, name in enumerate(names):
        # edges only point forward, so the graph is acyclic by construction
        down = tuple(m for m in names[i + 1:] if rng.random() < 0.3)
        services[name] = spec(name, *down)
    g = validate_graph(ServiceGraph(services, (("s0", 1.0),)))
    path = sample_call_path(g, rng)
    assert path[0] == "s0" and set(path) <= set(names)
