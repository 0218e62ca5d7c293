"""Discrete-event simulator of microservice chains on a VM tier with a
serverless overflow tier steered by a per-service spike controller."""

from .controller import (Controller, ControllerConfig, MetricsSnapshot, compute_weights,
                         synthesize_autoscaler_metric)
from .engine import Event, EventKind, EventQueue, Request, Simulation
from .errors import (ConfigError, GraphError, InvariantViolation, SimulationError,
                     TraceError)
from .faastier import BillingLedger, FaasConfig, FaasTier, billing_cost
from .metrics import (CostReport, LatencyRecords, SloReport, cost_total, percentile_window,
                      slo_intervals, summary_compare)
from .router import RoutingTable, RoutingWeights, propagate_stickiness, route
from .runner import RunReport, build_simulation, run_scenario
from .scenario import ScenarioConfig, load_scenario
from .topology import (ServiceGraph, ServiceSpec, sample_call_path, throughput_capacity,
                       validate_graph)
from .trace import (LoadTrace, SpikeSpec, extract_window, parse_trace, rate_at, scale_trace,
                    synthesize_spike)
from .vmtier import CaConfig, ClusterState, HpaConfig, VmTier

__version__ = "0.1.0"
