import json

import pytest
import tomli
import tomli_w

from hybridscale import cli as cli_mod
from hybridscale.errors import ConfigError, InvariantViolation
from hybridscale.runner import REPORT_FILES, run_scenario
from hybridscale.scenario import config_from_dict, load_scenario

SMALL = {
    "name": "small",
    "seed": 3,
    "duration_s": 60,
    "scale": 1.0,
    "window_s": 5,
    "trace": {"kind": "spike", "start": 20, "baseline_rate": 40, "peak_rate": 90, "ramp_up": 2, "hold": 10,
              "decay": 5},
    "services": [
        {"name": "front", "service_time_ms": 20, "per_pod_capacity_rps": 30, "concurrency_per_pod": 2,
         "downstream": ["back"], "initial_replicas": 2},
        {"name": "back", "service_time_ms": 20, "per_pod_capacity_rps": 30, "concurrency_per_pod": 2,
         "initial_replicas": 2},
    ],
    "faas": {"price_per_gb_s": 1e-5},
}


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(tomli_w.dumps(SMALL))
    return path


def invoke(args, capsys):
    with pytest.raises(SystemExit) as exc:
        cli_mod.main(args)
    out = capsys.readouterr()
    return exc.value.code, out.out + out.err


class TestScenario:
    def test_minimal_defaults(self):
        cfg = config_from_dict({k: SMALL[k] for k in ("name", "seed", "duration_s", "scale", "trace", "services")})
        assert cfg.mode == "baseline" and cfg.slo_ms == 400 and cfg.hpa.cpu_target == 0.5
        assert cfg.hpa.sync_period_s == 15 and cfg.ca.scan_interval_s == 10 and cfg.ca.vm_boot_delay_s == 120
        assert cfg.ca.vm_hourly_cost == 0.167 and cfg.faas.cold_start_ms == 150 and cfg.request_timeout_s == 10
        assert cfg.graph().names == ["front", "back"]

    def test_cpu_target_bound(self):
        with pytest.raises(ConfigError, match="cpu_target"):
            config_from_dict({**SMALL, "hpa": {"cpu_target": 1.5}})

    def test_node_failure_needs_parameters(self):
        with pytest.raises(ConfigError, match="failure"):
            config_from_dict({**SMALL, "mode": "node_failure"})

    def test_all_problems_at_once(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({**SMALL, "bogus": 1, "hpa": {"cpu_target": 0, "nope": 2}, "seed": "x"})
        msg = str(exc.value)
        for frag in ("unknown key bogus", "unknown key hpa.nope", "cpu_target", "seed must be an integer"):
            assert frag in msg

    def test_missing_required(self):
        raw = dict(SMALL)
        del raw["services"]
        with pytest.raises(ConfigError, match="missing required key services"):
            config_from_dict(raw)

    def test_overrides(self):
        cfg = config_from_dict(SMALL).with_overrides({"faas.prewarmed": False, "mode": "flare"})
        assert cfg.faas.prewarmed is False and cfg.mode == "flare"

    def test_json_accepted(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps(SMALL))
        assert load_scenario(p).name == "small"

    def test_entry_traces_sum(self):
        raw = {**SMALL, "trace": None}
        del raw["trace"]
        raw["services"] = SMALL["services"] + [
            {"name": "other", "service_time_ms": 10, "per_pod_capacity_rps": 30}]
        raw["entry_traces"] = {"front": {"kind": "constant", "rate": 10},
                               "other": {"kind": "constant", "rate": 5}}
        cfg = config_from_dict(raw)
        assert set(cfg.load_trace().rates) == {15}
        assert dict(cfg.graph().entrypoints) == {"front": 0.5, "other": 0.5}

    def test_shipped_scenarios_load(self, scenarios_dir):
        names = {p.stem for p in scenarios_dir.glob("*.toml")}
        assert {"trace_a_spike", "trace_b_spike", "steady_hour", "node_failure"} <= names
        for p in scenarios_dir.glob("*.toml"):
            load_scenario(p)

    def test_report_deterministic(self, tmp_path):
        cfg = config_from_dict({**SMALL, "mode": "flare"})
        run_scenario(cfg, tmp_path / "a")
        run_scenario(cfg, tmp_path / "b")
        for name in REPORT_FILES:
            a = json.loads((tmp_path / "a" / name).read_text()) if name.endswith(".json") else \
                (tmp_path / "a" / name).read_text()
            b = json.loads((tmp_path / "b" / name).read_text()) if name.endswith(".json") else \
                (tmp_path / "b" / name).read_text()
            if isinstance(a, dict):
                a.pop("generated_at", None)
                b.pop("generated_at", None)
            assert a == b, name


class TestCli:
    def test_simulate_writes_reports(self, small, tmp_path, capsys):
        code, out = invoke(["simulate", str(small), "--out", str(tmp_path / "r"), "--event-log"], capsys)
        assert code == 0, out
        for name in REPORT_FILES + ("event_log.txt",):
            assert (tmp_path / "r" / name).is_file()
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert summary["arrivals"] == summary["completions"] + summary["timeouts"]

    def test_env_default_out(self, small, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("HYBRIDSCALE_OUT", str(tmp_path / "envout"))
        code, _ = invoke(["simulate", str(small)], capsys)
        assert code == 0 and (tmp_path / "envout" / "small" / "summary.json").is_file()

    def test_compare_paired(self, small, tmp_path, capsys):
        invoke(["simulate", str(small), "--out", str(tmp_path / "bl")], capsys)
        invoke(["simulate", str(small), "--mode", "flare", "--out", str(tmp_path / "fl")], capsys)
        code, out = invoke(["compare", str(tmp_path / "bl"), str(tmp_path / "fl"),
                            "--out", str(tmp_path / "cmp.json")], capsys)
        assert code == 0, out
        rows = json.loads((tmp_path / "cmp.json").read_text())
        assert [r["label"] for r in rows] == ["small:baseline", "small:flare"]
        assert "peak_p95_reduction_pct" in rows[1]

    def test_compare_seed_mismatch(self, small, tmp_path, capsys):
        invoke(["simulate", str(small), "--out", str(tmp_path / "a")], capsys)
        invoke(["simulate", str(small), "--seed", "9", "--out", str(tmp_path / "b")], capsys)
        code, out = invoke(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out",
                            str(tmp_path / "c.csv")], capsys)
        assert code == 1 and "seed 3" in out and "seed 9" in out
        code, _ = invoke(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out",
                          str(tmp_path / "c.csv"), "--force"], capsys)
        assert code == 0 and (tmp_path / "c.csv").read_text().startswith("label,")

    def test_repeat_reports_median(self, small, tmp_path, capsys):
        code, out = invoke(["simulate", str(small), "--repeat", "3", "--out", str(tmp_path / "rep")], capsys)
        assert code == 0, out
        med = json.loads((tmp_path / "rep" / "median_summary.json").read_text())
        assert med["seeds"] == [3, 4, 5]
        code, _ = invoke(["compare", str(tmp_path / "rep"), "--out", str(tmp_path / "m.json")], capsys)
        assert code == 0

    def test_validation_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text(tomli_w.dumps({**SMALL, "hpa": {"cpu_target": 1.5}}))
        code, out = invoke(["simulate", str(bad), "--out", str(tmp_path / "x")], capsys)
        assert code == 1 and "cpu_target" in out
        assert not (tmp_path / "x").exists()

    def test_invariant_exit_code(self, small, tmp_path, capsys, monkeypatch):
        def boom(*a, **k):
            raise InvariantViolation("conservation violated")
        monkeypatch.setattr(cli_mod, "run_scenario", boom)
        code, out = invoke(["simulate", str(small), "--out", str(tmp_path / "x")], capsys)
        assert code == 2 and "conservation" in out

    def test_set_override(self, small, tmp_path, capsys):
        code, _ = invoke(["simulate", str(small), "--mode", "flare", "--set", "faas.prewarmed=false",
                          "--out", str(tmp_path / "c")], capsys)
        assert code == 0

    def test_calibrate_writes_file(self, small, tmp_path, capsys):
        out_file = tmp_path / "cal.toml"
        code, out = invoke(["calibrate", str(small), "--target-p50", "50", "--target-p95", "80",
                            "--duration", "120", "--out", str(out_file)], capsys)
        assert code == 0, out
        raw = tomli.loads(out_file.read_text())
        rec = raw["calibration"]
        assert rec["achieved_p50_ms"] == pytest.approx(50, rel=0.02)
        assert raw["services"][0]["service_time_ms"] != SMALL["services"][0]["service_time_ms"]
