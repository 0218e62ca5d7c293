"""Command-line entry point: ``hybridscale simulate | compare | calibrate``.

Exit codes: 0 success, 1 invalid input (scenario, trace, arguments),
2 a simulation invariant was violated.
"""

from __future__ import annotations

import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import tomli

from . import __version__
from .errors import ConfigError, InvariantViolation, SimulationError
from .metrics import median_summary, summary_compare
from .runner import REPORT_FILES, run_scenario
from .scenario import MODES, ScenarioConfig, dump_scenario, load_scenario
from .trace import rate_at

OUT_ENV = "HYBRIDSCALE_OUT"
EXIT_VALIDATION = 1
EXIT_INVARIANT = 2


class ValidationFailure(click.ClickException):
    exit_code = EXIT_VALIDATION


def _parse_sets(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValidationFailure(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        out[key.strip()] = value
    return out


def _load(path, overrides=None) -> ScenarioConfig:
    try:
        cfg = load_scenario(path)
        if overrides:
            cfg = cfg.with_overrides(overrides)
        return cfg
    except FileNotFoundError as exc:
        raise ValidationFailure(f"cannot read scenario: {exc}") from None
    except (ConfigError, SimulationError, ValueError) as exc:
        raise ValidationFailure(f"invalid scenario {path}: {exc}") from None


def _run_one(args):
    cfg, out_dir, event_log = args
    report = run_scenario(cfg, out_dir=out_dir, event_log=event_log)
    return report.summary()


@click.group()
@click.version_option(version=__version__)
def cli():
    """Simulate microservice chains on VMs with a serverless overflow tier."""


@cli.command()
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help=f"Output directory (default: ${OUT_ENV} or ./runs/<scenario>).")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--mode", type=click.Choice(MODES), default=None, help="Override the scenario mode.")
@click.option("--event-log", is_flag=True, help="Also write event_log.txt.")
@click.option("--repeat", type=click.IntRange(min=1), default=1,
              help="Run N consecutive seeds in worker processes and report the medians.")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
              help="Override a scenario key, e.g. --set faas.prewarmed=false.")
def simulate(scenario, out_dir, seed, mode, event_log, repeat, sets):
    """Run SCENARIO and write its report files."""
    overrides = _parse_sets(sets)
    if seed is not None:
        overrides["seed"] = seed
    if mode is not None:
        overrides["mode"] = mode
    cfg = _load(scenario, overrides)
    if out_dir is None:
        base = os.environ.get(OUT_ENV)
        out_dir = Path(base) / cfg.name if base else Path("runs") / cfg.name
    out = Path(out_dir)
    try:
        if repeat == 1:
            summary = _run_one((cfg, out, event_log))
            click.echo(_describe(summary))
            click.echo(f"wrote {', '.join(REPORT_FILES)} to {out}")
            return
        jobs = []
        for i in range(repeat):
            rep_cfg = cfg.with_overrides({"seed": cfg.seed + i})
            jobs.append((rep_cfg, out / f"rep_{rep_cfg.seed}", event_log))
        with ProcessPoolExecutor(max_workers=min(repeat, os.cpu_count() or 1)) as pool:
            summaries = list(pool.map(_run_one, jobs))
    except InvariantViolation as exc:
        click.echo(f"invariant violated: {exc}", err=True)
        sys.exit(EXIT_INVARIANT)
    for s in summaries:
        click.echo(_describe(s))
    med = median_summary(summaries)
    med["seeds"] = [s["seed"] for s in summaries]
    out.mkdir(parents=True, exist_ok=True)
    (out / "median_summary.json").write_text(json.dumps(_jsonable(med), indent=2, sort_keys=True) + "\n")
    click.echo(f"median over {repeat} seeds: {_describe(med)}")


def _describe(s: dict) -> str:
    return (f"{s['label']} seed={s['seed']} peak_p95={s['peak_p95_ms']:.1f}ms "
            f"viol_p95={s['violation_s_p95']:g}s viol_p50={s['violation_s_p50']:g}s "
            f"cost={s['total_cost']:.4f} timeouts={s['timeouts']}")


def _jsonable(o):
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    if isinstance(o, dict):
        return {k: _jsonable(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_jsonable(v) for v in o]
    return o


def _read_summary(path: Path) -> dict:
    s = json.loads(path.read_text())
    for k, v in s.items():
        if v == "inf":
            s[k] = math.inf
    return s


def _load_run_dir(d: Path) -> tuple[dict, list[int]]:
    """Summary of one run directory; repeated runs collapse to their medians."""
    if (d / "summary.json").is_file():
        s = _read_summary(d / "summary.json")
        return s, [s["seed"]]
    reps = sorted(p for p in d.glob("rep_*") if (p / "summary.json").is_file())
    if not reps:
        raise ValidationFailure(f"{d} holds no summary.json (nor rep_*/summary.json)")
    summaries = [_read_summary(p / "summary.json") for p in reps]
    digests = {s["trace_digest"] for s in summaries}
    if len(digests) > 1:
        raise ValidationFailure(f"{d}: repetitions come from different traces")
    return median_summary(summaries), sorted(s["seed"] for s in summaries)


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_file", type=click.Path(dir_okay=False), required=True,
              help="Summary table; .json for JSON, anything else for CSV.")
@click.option("--force", is_flag=True, help="Compare even if traces or seeds differ.")
def compare(run_dirs, out_file, force):
    """Tabulate peak latency, SLO violation and cost across RUN_DIRS (first is the reference)."""
    loaded = [(_load_run_dir(Path(d)), d) for d in run_dirs]
    (ref, ref_seeds), ref_dir = loaded[0]
    if not force:
        for (s, seeds), d in loaded[1:]:
            if s["trace_digest"] != ref["trace_digest"]:
                raise ValidationFailure(
                    f"trace mismatch: {ref_dir} uses {ref['trace_digest']}, {d} uses {s['trace_digest']}")
            if seeds != ref_seeds:
                raise ValidationFailure(
                    f"seed mismatch: {ref_dir} has seed {_seeds(ref_seeds)}, {d} has seed {_seeds(seeds)}")
    rows = summary_compare([s for (s, _), _ in loaded])
    for row, ((_, seeds), _) in zip(rows, loaded):
        row["seeds"] = _seeds(seeds)
    out = Path(out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".json":
        out.write_text(json.dumps(_jsonable(rows), indent=2) + "\n")
    else:
        cols = list(rows[0])
        lines = [",".join(cols)]
        for row in rows:
            lines.append(",".join(_cell(row[c]) for c in cols))
        out.write_text("\n".join(lines) + "\n")
    for row in rows:
        click.echo("  ".join(f"{k}={_cell(v)}" for k, v in row.items()))


def _seeds(seeds: list[int]) -> str:
    return str(seeds[0]) if len(seeds) == 1 else "+".join(map(str, seeds))


def _cell(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    return str(v)


# -- calibration -------------------------------------------------------------


def steady_variant(cfg: ScenarioConfig, duration_s: float, mode: str = "baseline") -> ScenarioConfig:
    """Same scenario under constant load at its starting rate, without failures."""
    rate = rate_at(cfg.load_trace(), 0.0)
    raw = cfg.to_dict()
    raw.pop("failure", None)
    raw.update(mode=mode, duration_s=duration_s, scale=1.0,
               trace={"kind": "constant", "rate": rate})
    return _from_raw(raw, cfg)


def _from_raw(raw: dict, like: ScenarioConfig) -> ScenarioConfig:
    from .scenario import config_from_dict
    return config_from_dict(raw, like.base_dir)


def _scaled(cfg: ScenarioConfig, time_scale: float, cap_scale: float) -> ScenarioConfig:
    raw = cfg.to_dict()
    for s in raw["services"]:
        s["service_time_ms"] = s["service_time_ms"] * time_scale
        # capacity follows the service rate so the load fraction is unchanged
        s["per_pod_capacity_rps"] = s["per_pod_capacity_rps"] / time_scale * cap_scale
    return _from_raw(raw, cfg)


def _steady_percentiles(cfg: ScenarioConfig, warmup_s: float) -> tuple[float, float]:
    rep = run_scenario(cfg)
    rec = rep.records.subset(rep.records.arrival >= warmup_s)
    lat = sorted(rec.latency_ms)
    from .metrics import nearest_rank
    return nearest_rank(lat, 0.50), nearest_rank(lat, 0.95)


def calibrate_scenario(cfg: ScenarioConfig, target_p50: float, target_p95: float,
                       duration_s: float = 300.0, iterations: int = 12,
                       target_faas_ratio: float | None = None, faas_duration_s: float = 3600.0,
                       echo=lambda msg: None) -> tuple[dict, dict]:
    """Fit service-time and per-pod-capacity multipliers to steady P50/P95.

    Service times move the median; per-pod capacity sets the replica count
    the autoscaler settles on and therefore the queueing that shapes P95.
    Optionally fits ``faas.price_per_gb_s`` so the steady serverless-only
    cost is ``target_faas_ratio`` times the VM-only cost. Returns the new raw
    scenario and a record of the fit.
    """
    if not (0 < target_p50 <= target_p95):
        raise ValueError("targets must satisfy 0 < p50 <= p95")
    steady = steady_variant(cfg, duration_s)
    warm = min(60.0, duration_s / 4)
    time_scale, cap_scale = 1.0, 1.0
    p50, p95 = _steady_percentiles(steady, warm)
    for _ in range(2):
        # service times: the median scales almost linearly with them
        for _ in range(iterations):
            if abs(p50 - target_p50) <= 0.005 * target_p50:
                break
            time_scale *= target_p50 / p50
            p50, p95 = _steady_percentiles(_scaled(steady, time_scale, cap_scale), warm)
        # capacity: bisect on the multiplier, higher capacity -> fewer pods -> higher P95
        lo, hi = 0.2, 1.5
        for _ in range(iterations):
            if abs(p95 - target_p95) <= 0.01 * target_p95:
                break
            if p95 < target_p95:
                lo = cap_scale
            else:
                hi = cap_scale
            cap_scale = (lo + hi) / 2
            p50, p95 = _steady_percentiles(_scaled(steady, time_scale, cap_scale), warm)
        echo(f"service-time x{time_scale:.4f} capacity x{cap_scale:.4f}: p50={p50:.1f}ms p95={p95:.1f}ms")
    fitted = _scaled(cfg, time_scale, cap_scale)
    raw = fitted.to_dict()
    record = {"target_p50_ms": target_p50, "target_p95_ms": target_p95,
              "achieved_p50_ms": round(p50, 3), "achieved_p95_ms": round(p95, 3),
              "service_time_scale": round(time_scale, 6), "capacity_scale": round(cap_scale, 6)}
    if target_faas_ratio is not None:
        vm_run = run_scenario(steady_variant(fitted, faas_duration_s, "baseline"))
        sl_run = run_scenario(steady_variant(fitted, faas_duration_s, "serverless_only"))
        f = fitted.faas
        inv, gbs = sl_run.cost.faas_invocations, sl_run.cost.faas_gb_seconds
        price = (target_faas_ratio * vm_run.cost.total - inv * f.price_per_invocation) / gbs
        if not price > 0:
            raise ValueError("invocation charges alone exceed the target ratio; lower price_per_invocation")
        raw.setdefault("faas", {})["price_per_gb_s"] = float(f"{price:.6g}")
        record.update(target_faas_ratio=target_faas_ratio, price_per_gb_s=raw["faas"]["price_per_gb_s"],
                      vm_only_cost=round(vm_run.cost.total, 6))
        echo(f"price_per_gb_s={raw['faas']['price_per_gb_s']} (VM-only cost {vm_run.cost.total:.4f})")
    raw["calibration"] = record
    return raw, record


@cli.command()
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--target-p50", type=float, required=True, help="Steady-state median latency, ms.")
@click.option("--target-p95", type=float, required=True, help="Steady-state P95 latency, ms.")
@click.option("--target-faas-ratio", type=float, default=None,
              help="Also fit price_per_gb_s to this serverless-only / VM-only steady cost ratio.")
@click.option("--duration", type=float, default=300.0, show_default=True,
              help="Simulated seconds per latency-fitting run.")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default=None,
              help="Where to write the calibrated scenario (default: <scenario>.calibrated.toml).")
def calibrate(scenario, target_p50, target_p95, target_faas_ratio, duration, out_file):
    """Fit service times and per-pod capacity of SCENARIO to steady-state latency targets."""
    cfg = _load(scenario)
    try:
        raw, record = calibrate_scenario(cfg, target_p50, target_p95, duration,
                                         target_faas_ratio=target_faas_ratio, echo=click.echo)
    except InvariantViolation as exc:
        click.echo(f"invariant violated: {exc}", err=True)
        sys.exit(EXIT_INVARIANT)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    path = Path(scenario)
    out = Path(out_file) if out_file else path.with_name(path.stem + ".calibrated" + path.suffix)
    dump_scenario(raw, out)
    click.echo(f"wrote {out}: {json.dumps(record)}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(EXIT_VALIDATION)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_VALIDATION if not isinstance(exc, ValidationFailure) else exc.exit_code)
    except InvariantViolation as exc:
        click.echo(f"invariant violated: {exc}", err=True)
        sys.exit(EXIT_INVARIANT)
    except (ConfigError, SimulationError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    sys.exit(0)


if __name__ == "__main__":
    main()
