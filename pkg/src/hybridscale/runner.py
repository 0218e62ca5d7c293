"""Build a simulation from a scenario, run it, and write its report files."""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .controller import Controller
from .engine import FailurePlan, RunStats, Simulation
from .faastier import FaasTier
from .metrics import (CostReport, LatencyRecords, SloReport, percentile_window, series_csv,
                      slo_intervals, vm_cost)
from .router import RoutingTable
from .scenario import ScenarioConfig
from .trace import rate_at
from .vmtier import VmTier

REPORT_FILES = ("latency_series.csv", "slo_report.json", "cost_report.json", "summary.json")


def build_simulation(cfg: ScenarioConfig, **overrides) -> Simulation:
    graph = cfg.graph()
    trace = cfg.load_trace()
    if trace.end < cfg.duration_s:
        raise ValueError(f"trace covers {trace.end}s but the run needs {cfg.duration_s}s")
    mode = cfg.mode
    vm = faas = controller = None
    table = RoutingTable(graph.services)
    if mode != "serverless_only":
        replicas = cfg.initial_replicas()
        autoscale = True
        if mode == "overprovisioned":
            replicas = {s: math.ceil(n * cfg.overprovision_factor) for s, n in replicas.items()}
            autoscale = False
        vm = VmTier(graph, cfg.hpa, cfg.ca, replicas, autoscale=autoscale)
    use_faas = cfg.faas.enabled and mode in ("flare", "serverless_only")
    if use_faas:
        faas = FaasTier(cfg.faas)
    if mode == "flare" and use_faas and cfg.controller.enabled:
        controller = Controller(graph, table, cfg.controller)
    if mode == "serverless_only" and not use_faas:
        raise ValueError("serverless_only mode needs faas.enabled = true")
    failure = None
    if cfg.failure is not None and mode in ("baseline", "flare", "node_failure"):
        failure = FailurePlan(cfg.failure.at, list(cfg.failure.nodes), cfg.failure.detection_delay_s)

    def rate_fn(t, _trace=trace):
        return rate_at(_trace, t)

    entry_fns = None
    if cfg.entry_traces:
        entry_fns = {e: (lambda t, _tr=tr: rate_at(_tr, t)) for e, tr in cfg.entry_traces_loaded().items()}

    kwargs = dict(
        graph=graph, rate_fn=rate_fn, max_rate=trace.peak, duration=cfg.duration_s, seed=cfg.seed,
        vm=vm, faas=faas, table=table, controller=controller,
        controller_interval_s=cfg.controller.tick_interval_s,
        hpa_interval_s=cfg.hpa.sync_period_s, ca_interval_s=cfg.ca.scan_interval_s,
        request_timeout_s=cfg.request_timeout_s, deterministic_arrivals=cfg.deterministic_arrivals,
        service_time_dist=cfg.service_time_dist, failure=failure, entry_rate_fns=entry_fns,
    )
    kwargs.update(overrides)
    return Simulation(**kwargs)


@dataclass
class RunReport:
    scenario_id: str
    mode: str
    seed: int
    trace_digest: str
    duration_s: float
    slo_ms: float
    window_s: float
    stats: RunStats
    records: LatencyRecords
    slo: SloReport
    cost: CostReport
    p50_series: list = field(repr=False, default_factory=list)
    p95_series: list = field(repr=False, default_factory=list)
    event_log_digest: str | None = None
    event_log: list[str] | None = field(default=None, repr=False)
    controller_csv: str | None = field(default=None, repr=False)
    max_w_s: dict = field(default_factory=dict)
    faas_stats: dict = field(default_factory=dict)
    variant: str = ""

    @property
    def label(self) -> str:
        tag = f"{self.scenario_id}:{self.mode}"
        return f"{tag}:{self.variant}" if self.variant else tag

    def series(self, p: float, key: str = "completion") -> list[tuple[float, float]]:
        return percentile_window(self.records, self.window_s, p, key=key)

    def summary(self) -> dict:
        return {
            "label": self.label,
            "scenario": self.scenario_id,
            "mode": self.mode,
            "variant": self.variant,
            "seed": self.seed,
            "trace_digest": self.trace_digest,
            "duration_s": self.duration_s,
            "arrivals": self.stats.arrivals,
            "completions": self.stats.completions,
            "timeouts": self.stats.timeouts,
            "vm_hops": self.stats.vm_hops,
            "serverless_hops": self.stats.serverless_hops,
            "peak_p50_ms": self.slo.peak_p50_ms,
            "peak_p95_ms": self.slo.peak_p95_ms,
            "violation_s_p50": self.slo.total_violation_s_p50,
            "violation_s_p95": self.slo.total_violation_s_p95,
            "vm_cost": self.cost.vm_cost,
            "faas_cost": self.cost.faas_cost,
            "total_cost": self.cost.total,
            "vm_node_seconds": self.cost.vm_node_seconds,
        }

    def write(self, out_dir, event_log: bool = False, timestamp: bool = True) -> Path:
        """Write the four report files (plus optional logs) into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "latency_series.csv").write_text(series_csv(self.p50_series, self.p95_series))
        _write_json(out / "slo_report.json", self.slo.to_dict())
        _write_json(out / "cost_report.json", self.cost.to_dict())
        summary = self.summary()
        if timestamp:
            summary["generated_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        _write_json(out / "summary.json", summary)
        if event_log and self.event_log is not None:
            (out / "event_log.txt").write_text("\n".join(self.event_log) + "\n")
        if self.controller_csv:
            (out / "controller_decisions.csv").write_text(self.controller_csv)
        return out


def _json_default(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialise {type(o)}")


def _inf_to_str(o):
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    if isinstance(o, dict):
        return {k: _inf_to_str(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_inf_to_str(v) for v in o]
    return o


def _write_json(path: Path, obj):
    path.write_text(json.dumps(_inf_to_str(obj), indent=2, sort_keys=True, default=_json_default) + "\n")


def run_scenario(cfg: ScenarioConfig, out_dir=None, event_log: bool = False, variant: str = "",
                 keep_event_log: bool | None = None) -> RunReport:
    """Execute ``cfg`` and return its report; files are written when ``out_dir`` is given."""
    sim = build_simulation(cfg, event_log=event_log)
    if sim.controller is not None and cfg.controller.log_decisions:
        sim.controller.config.log_decisions = True
    stats = sim.run()
    if sim.vm is not None:
        sim.vm.check_invariants()
    records = LatencyRecords.from_requests(sim.requests, cfg.request_timeout_s)
    p50 = percentile_window(records, cfg.window_s, 0.50)
    p95 = percentile_window(records, cfg.window_s, 0.95)
    i50, t50 = slo_intervals(p50, cfg.slo_ms, cfg.window_s)
    i95, t95 = slo_intervals(p95, cfg.slo_ms, cfg.window_s)
    slo = SloReport(cfg.slo_ms, cfg.window_s, i50, i95, t50, t95,
                    max((v for _, v in p50), default=0.0), max((v for _, v in p95), default=0.0))
    node_s = sim.vm.node_seconds(cfg.duration_s) if sim.vm is not None else 0.0
    vmc = vm_cost(node_s, cfg.ca.vm_hourly_cost)
    fc = sim.faas.cost() if sim.faas is not None else 0.0
    ledger = sim.faas.ledger if sim.faas is not None else None
    cost = CostReport(vmc, fc, vmc + fc, node_s,
                      ledger.invocations if ledger else 0,
                      ledger.billed_gb_seconds if ledger else 0.0)
    report = RunReport(
        scenario_id=cfg.name, mode=cfg.mode, seed=cfg.seed, trace_digest=cfg.digest(),
        duration_s=cfg.duration_s, slo_ms=cfg.slo_ms, window_s=cfg.window_s, stats=stats,
        records=records, slo=slo, cost=cost, p50_series=p50, p95_series=p95,
        event_log_digest=sim.event_log_digest() if event_log else None,
        event_log=sim.log_lines if (event_log and keep_event_log is not False) else None,
        controller_csv=sim.controller.decisions_csv() if sim.controller and cfg.controller.log_decisions else None,
        max_w_s=dict(sim.controller.max_w_s) if sim.controller else {},
        faas_stats=({"cold_starts": sim.faas.cold_starts, "warm_starts": sim.faas.warm_starts,
                     "peak_instances": sim.faas.peak_instances, "queued": sim.faas.queued}
                    if sim.faas else {}),
        variant=variant,
    )
    if out_dir is not None:
        report.write(out_dir, event_log=event_log)
    return report
