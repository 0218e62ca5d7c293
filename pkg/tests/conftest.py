from pathlib import Path

import pytest

from hybridscale.topology import ServiceGraph, ServiceSpec

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS


def chain(*names, service_time_ms=50.0, capacity=100.0, concurrency=1) -> ServiceGraph:
    return ServiceGraph.chain([ServiceSpec(n, service_time_ms, capacity, concurrency_per_pod=concurrency)
                               for n in names])


def pytest_terminal_summary(terminalreporter):
    acc = __import__("sys").modules.get("test_acceptance")
    lines = getattr(acc, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
