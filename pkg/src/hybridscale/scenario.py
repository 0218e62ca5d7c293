"""Declarative scenario files (TOML or JSON) and their validation."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .controller import ControllerConfig
from .errors import ConfigError, SimulationError
from .faastier import FaasConfig
from .topology import ServiceGraph, ServiceSpec, validate_graph
from .trace import (LoadTrace, SpikeSpec, constant_trace, extract_window, parse_trace,
                    scale_trace, synthesize_spike)
from .vmtier import CaConfig, HpaConfig

MODES = ("baseline", "flare", "overprovisioned", "serverless_only", "node_failure")
SERVICE_TIME_DISTS = ("exponential", "deterministic")
TRACE_KINDS = ("spike", "file", "constant")

_TOP_KEYS = {"name", "mode", "seed", "duration_s", "scale", "slo_ms", "window_s",
             "request_timeout_s", "service_time_dist", "deterministic_arrivals", "trace",
             "services", "entrypoints", "hpa", "ca", "faas", "controller", "overprovision",
             "failure", "description", "calibration", "entry_traces"}
_REQUIRED = ("name", "seed", "duration_s", "scale", "trace", "services")
_SERVICE_KEYS = {"name", "service_time_ms", "per_pod_capacity_rps", "vcpu_per_pod",
                 "concurrency_per_pod", "downstream", "initial_replicas"}
_TRACE_KEYS = {
    "spike": {"kind", "start", "baseline_rate", "peak_rate", "ramp_up", "hold", "decay", "resolution"},
    "file": {"kind", "path", "unit", "window_start", "window_duration"},
    "constant": {"kind", "rate", "resolution"},
}


@dataclass
class FailureConfig:
    at: float
    nodes: list[str]
    detection_delay_s: float = 45.0


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    duration_s: float
    scale: float
    trace: dict
    services: list[dict]
    mode: str = "baseline"
    entrypoints: dict[str, float] | None = None
    slo_ms: float = 400.0
    window_s: float = 5.0
    request_timeout_s: float = 10.0
    service_time_dist: str = "exponential"
    deterministic_arrivals: bool = False
    hpa: HpaConfig = field(default_factory=HpaConfig)
    ca: CaConfig = field(default_factory=CaConfig)
    faas: FaasConfig = field(default_factory=FaasConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    overprovision_factor: float = 2.0
    failure: FailureConfig | None = None
    entry_traces: dict[str, dict] | None = None
    description: str = ""
    base_dir: Path | None = None
    raw: dict = field(default_factory=dict, repr=False)

    # -- derived objects --------------------------------------------------

    def graph(self) -> ServiceGraph:
        specs = {}
        for s in self.services:
            specs[s["name"]] = ServiceSpec(
                s["name"], float(s["service_time_ms"]), float(s["per_pod_capacity_rps"]),
                float(s.get("vcpu_per_pod", 1.0)), int(s.get("concurrency_per_pod", 1)),
                tuple(s.get("downstream", ())))
        entries = self.entrypoints
        if not entries and self.entry_traces:
            entries = {e: 1.0 / len(self.entry_traces) for e in self.entry_traces}
        entries = entries or {self.services[0]["name"]: 1.0}
        return validate_graph(ServiceGraph(specs, tuple(entries.items())))

    def initial_replicas(self) -> dict[str, int]:
        return {s["name"]: int(s.get("initial_replicas", self.hpa.min_replicas)) for s in self.services}

    def load_trace(self) -> LoadTrace:
        """Total offered load; the sum of the per-entry traces when those are given."""
        if self.entry_traces:
            parts = list(self.entry_traces_loaded().values())
            rates = tuple(sum(vals) for vals in zip(*(p.rates for p in parts)))
            return LoadTrace(parts[0].times[:len(rates)], rates, parts[0].resolution)
        return self._build_trace(self.trace)

    def entry_traces_loaded(self) -> dict[str, LoadTrace]:
        return {e: self._build_trace(t) for e, t in (self.entry_traces or {}).items()}

    def _build_trace(self, t: dict) -> LoadTrace:
        kind = t.get("kind", "spike")
        if kind == "spike":
            spec = SpikeSpec(float(t["start"]), float(t["baseline_rate"]), float(t["peak_rate"]),
                             float(t.get("ramp_up", 0)), float(t.get("hold", 0)), float(t.get("decay", 0)))
            trace = synthesize_spike(spec, self.duration_s, float(t.get("resolution", 1.0)))
        elif kind == "constant":
            trace = constant_trace(float(t["rate"]), self.duration_s, float(t.get("resolution", 1.0)))
        else:
            path = Path(t["path"])
            if not path.is_absolute() and self.base_dir is not None:
                path = self.base_dir / path
            trace = parse_trace(path, t.get("unit", "per_second"))
            if "window_start" in t:
                trace = extract_window(trace, float(t["window_start"]),
                                       float(t.get("window_duration", self.duration_s)))
        return scale_trace(trace, self.scale)

    @property
    def spike(self) -> SpikeSpec | None:
        spikes = [t for t in [self.trace, *(self.entry_traces or {}).values()]
                  if t and t.get("kind", "spike") == "spike"]
        if not spikes:
            return None
        t = spikes[0]
        return SpikeSpec(float(t["start"]), float(t["baseline_rate"]) * self.scale,
                         float(t["peak_rate"]) * self.scale, float(t.get("ramp_up", 0)),
                         float(t.get("hold", 0)), float(t.get("decay", 0)))

    def digest(self) -> str:
        """Identifies the trace and topology; runs must agree on it to be compared."""
        h = hashlib.sha256()
        for tr in [self.load_trace(), *self.entry_traces_loaded().values()]:
            h.update(repr((tr.resolution, tr.rates)).encode())
        return h.hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> "ScenarioConfig":
        raw = copy.deepcopy(self.raw)
        for dotted, value in overrides.items():
            _set_dotted(raw, dotted, value)
        return config_from_dict(raw, self.base_dir)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _set_dotted(d: dict, dotted: str, value):
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {dotted}: {p} is not a table")
    cur[parts[-1]] = value


def _sub_config(cls, table: dict | None, prefix: str, problems: list[str]):
    table = table or {}
    if not isinstance(table, dict):
        problems.append(f"{prefix} must be a table")
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    for k in unknown:
        problems.append(f"unknown key {prefix}.{k}")
    kwargs = {k: v for k, v in table.items() if k in names}
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{prefix}: {exc}")
        return cls()
    problems.extend(obj.problems())
    return obj


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Validate a parsed scenario and apply defaults, reporting every problem at once."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a table/object")
    for k in sorted(set(raw) - _TOP_KEYS):
        problems.append(f"unknown key {k}")
    for k in _REQUIRED:
        if k not in raw and not (k == "trace" and "entry_traces" in raw):
            problems.append(f"missing required key {k}")

    mode = raw.get("mode", "baseline")
    if mode not in MODES:
        problems.append(f"mode must be one of {MODES}, got {mode!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed must be an integer")
    duration = raw.get("duration_s", 0)
    if not (isinstance(duration, (int, float)) and duration > 0):
        problems.append("duration_s must be > 0")
    scale = raw.get("scale", 1.0)
    if not (isinstance(scale, (int, float)) and math.isfinite(scale) and scale > 0):
        problems.append("scale must be a positive number")
    for key in ("slo_ms", "window_s", "request_timeout_s"):
        v = raw.get(key, 1.0)
        if not (isinstance(v, (int, float)) and v > 0):
            problems.append(f"{key} must be > 0")
    dist = raw.get("service_time_dist", "exponential")
    if dist not in SERVICE_TIME_DISTS:
        problems.append(f"service_time_dist must be one of {SERVICE_TIME_DISTS}")

    trace = {}
    if "trace" in raw or "entry_traces" not in raw:
        trace = _check_trace(raw.get("trace", {}), "trace", problems)
    entry_traces = raw.get("entry_traces")
    if entry_traces is not None:
        if not isinstance(entry_traces, dict) or not entry_traces:
            problems.append("entry_traces must be a non-empty table")
            entry_traces = None
        else:
            entry_traces = {e: _check_trace(t, f"entry_traces.{e}", problems)
                            for e, t in entry_traces.items()}
            declared = set((raw.get("entrypoints") or {}) or {})
            if declared and declared != set(entry_traces):
                problems.append("entry_traces must name exactly the entrypoints")

    services = raw.get("services", [])
    if not isinstance(services, list) or not services:
        problems.append("services must be a non-empty list")
        services = []
    for i, s in enumerate(services):
        if not isinstance(s, dict):
            problems.append(f"services[{i}] must be a table")
            continue
        for k in sorted(set(s) - _SERVICE_KEYS):
            problems.append(f"unknown key services[{i}].{k}")
        for k in ("name", "service_time_ms", "per_pod_capacity_rps"):
            if k not in s:
                problems.append(f"missing required key services[{i}].{k}")

    hpa = _sub_config(HpaConfig, raw.get("hpa"), "hpa", problems)
    ca = _sub_config(CaConfig, raw.get("ca"), "ca", problems)
    faas = _sub_config(FaasConfig, raw.get("faas"), "faas", problems)
    ctl = _sub_config(ControllerConfig, raw.get("controller"), "controller", problems)

    over = raw.get("overprovision", {}) or {}
    for k in sorted(set(over) - {"factor"}):
        problems.append(f"unknown key overprovision.{k}")
    factor = over.get("factor", 2.0)
    if not (isinstance(factor, (int, float)) and factor >= 1):
        problems.append("overprovision.factor must be >= 1")

    failure = None
    if "failure" in raw:
        f = raw["failure"] or {}
        for k in sorted(set(f) - {"at", "nodes", "detection_delay_s"}):
            problems.append(f"unknown key failure.{k}")
        if "at" not in f or "nodes" not in f:
            problems.append("failure requires 'at' and 'nodes'")
        else:
            failure = FailureConfig(float(f["at"]), list(f["nodes"]), float(f.get("detection_delay_s", 45.0)))
            if failure.detection_delay_s < 0 or failure.at < 0:
                problems.append("failure.at and failure.detection_delay_s must be >= 0")
    if mode == "node_failure" and failure is None:
        problems.append("mode=node_failure requires a [failure] table with 'at' and 'nodes'")

    entry = raw.get("entrypoints")
    cfg = None
    if not problems:
        cfg = ScenarioConfig(
            name=raw["name"], seed=seed, duration_s=float(duration), scale=float(scale),
            trace=dict(trace), services=[dict(s) for s in services], mode=mode,
            entrypoints=dict(entry) if entry else None,
            slo_ms=float(raw.get("slo_ms", 400.0)), window_s=float(raw.get("window_s", 5.0)),
            request_timeout_s=float(raw.get("request_timeout_s", 10.0)),
            service_time_dist=dist, deterministic_arrivals=bool(raw.get("deterministic_arrivals", False)),
            hpa=hpa, ca=ca, faas=faas, controller=ctl, overprovision_factor=float(factor),
            failure=failure, entry_traces=entry_traces,
            description=raw.get("description", ""), base_dir=base_dir,
            raw=copy.deepcopy(raw))
        try:
            cfg.graph()
            cfg.load_trace()
        except SimulationError as exc:
            problems.append(str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"invalid value: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def _check_trace(trace, prefix: str, problems: list[str]) -> dict:
    if not isinstance(trace, dict):
        problems.append(f"{prefix} must be a table")
        return {}
    kind = trace.get("kind", "spike")
    if kind not in TRACE_KINDS:
        problems.append(f"{prefix}.kind must be one of {TRACE_KINDS}")
        return dict(trace)
    for k in sorted(set(trace) - _TRACE_KEYS[kind]):
        problems.append(f"unknown key {prefix}.{k}")
    need = {"spike": ("start", "baseline_rate", "peak_rate"), "file": ("path",),
            "constant": ("rate",)}[kind]
    for k in need:
        if k not in trace:
            problems.append(f"missing required key {prefix}.{k}")
    return dict(trace)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomli.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.parent)


def dump_scenario(cfg_or_raw, path):
    raw = cfg_or_raw.to_dict() if isinstance(cfg_or_raw, ScenarioConfig) else cfg_or_raw
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        path.write_text(tomli_w.dumps(raw), encoding="utf-8")
