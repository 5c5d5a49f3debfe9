import csv
import io
import json
import time

import pytest
from click.testing import CliRunner

from swakv.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OOM, main, sweep_rows
from swakv.config import ConfigError, RunConfig
from swakv.engine import run_inference


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


CONSTRAINED = {
    "model": {"skew": 4.0},
    "workload": {"prompt_len": 8, "n": 32},
    "sparsity": {"variant": "swa", "ratio": 0.5},
    "scheduling": {"device_capacity": 16 * 128, "bandwidth": 1e6, "mac_rate": 1e9},
}


class TestRunConfig:
    def test_defaults_valid(self):
        cfg = RunConfig()
        assert cfg.cost_params().h == 16
        assert len(cfg.prompt_tokens()) == 8

    def test_roundtrip(self):
        cfg = RunConfig.from_dict(CONSTRAINED)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_field_level_messages(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_dict({"model": {"layers": 0, "heads": "2"}, "sparsity": {"ratio": 1.5}, "extra": {}})
        text = str(exc.value)
        for fragment in ("model.layers", "model.heads", "sparsity.ratio", "extra: unknown section"):
            assert fragment in text
        assert len(exc.value.errors) == 4

    @pytest.mark.parametrize(
        "data,field",
        [
            ({"workload": {"n": -1}}, "workload.n"),
            ({"workload": {"eos_id": 64}}, "workload.eos_id"),
            ({"workload": {"prompt": [1, 99]}}, "workload.prompt"),
            ({"workload": {"n": 2000}}, "workload.n"),
            ({"sparsity": {"variant": "window"}}, "sparsity.variant"),
            ({"sparsity": {"stride": 0}}, "sparsity.stride"),
            ({"scheduling": {"policy": "best"}}, "scheduling.policy"),
            ({"scheduling": {"quant_bits": 3}}, "scheduling.quant_bits"),
            ({"scheduling": {"bandwidth": 0}}, "scheduling.bandwidth"),
            ({"scheduling": {"recompute_overhead": 0.5}}, "scheduling.recompute_overhead"),
            ({"analysis": {"collect_rho": "yes"}}, "analysis.collect_rho"),
            ({"model": {"typo": 1}}, "model.typo"),
        ],
    )
    def test_rejections(self, data, field):
        with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
            RunConfig.from_dict(data)

    def test_explicit_prompt_wins(self):
        cfg = RunConfig.from_dict({"workload": {"prompt": [1, 2, 3]}})
        assert cfg.prompt_tokens() == [1, 2, 3]
        assert cfg.cost_params().s == 3

    def test_quant_bits_shrink_entries(self):
        cfg = RunConfig.from_dict({"scheduling": {"quant_bits": 4}})
        assert cfg.cost_params().bytes_per_element == 0.5

    def test_bad_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            RunConfig.from_file(tmp_path / "missing.json")
        (tmp_path / "broken.json").write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            RunConfig.from_file(tmp_path / "broken.json")


class TestRunCommand:
    def test_minimal_config_is_fast(self, tmp_path):
        cfg = write_config(tmp_path, {"workload": {"prompt_len": 8, "n": 16}})
        start = time.perf_counter()
        result = CliRunner().invoke(main, ["run", "--config", cfg, "--out", str(tmp_path / "o")])
        assert result.exit_code == 0, result.output
        assert time.perf_counter() - start < 5
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["generated_tokens"] == 16
        assert "wall_clock" not in report
        assert "seconds" in json.loads((tmp_path / "o" / "wall_clock.json").read_text())
        assert (tmp_path / "o" / "steps.csv").read_text().startswith("swakv.steps/v1,")

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, CONSTRAINED)
        runner = CliRunner()
        for d in ("a", "b"):
            assert runner.invoke(main, ["run", "--config", cfg, "--seed", "5", "--out", str(tmp_path / d)]).exit_code == 0
        for name in ("report.json", "steps.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        runner = CliRunner()
        a = runner.invoke(main, ["run", "--seed", "1"]).output
        b = runner.invoke(main, ["run", "--seed", "2"]).output
        assert a != b

    def test_zero_capacity_is_infeasible(self, tmp_path):
        cfg = write_config(tmp_path, {"scheduling": {"device_capacity": 0}})
        result = CliRunner().invoke(main, ["run", "--config", cfg])
        assert result.exit_code == EXIT_INFEASIBLE
        assert "InfeasiblePlan" in result.output

    def test_simulated_oom_exit_code(self, tmp_path):
        data = json.loads(json.dumps(CONSTRAINED))
        data["scheduling"]["policy"] = "all_device"
        result = CliRunner().invoke(main, ["run", "--config", write_config(tmp_path, data)])
        assert result.exit_code == EXIT_OOM
        assert "OutOfDeviceMemory" in result.output

    def test_malformed_config_exit_code(self, tmp_path):
        result = CliRunner().invoke(main, ["run", "--config", write_config(tmp_path, {"model": {"layers": -2}})])
        assert result.exit_code == EXIT_CONFIG
        assert "model.layers" in result.output


class TestPlanCommand:
    def test_prints_plan(self, tmp_path):
        result = CliRunner().invoke(main, ["plan", "--config", write_config(tmp_path, CONSTRAINED)])
        payload = json.loads(result.output)
        assert payload["plan"]["p1"] < payload["plan"]["p2"] <= 32
        assert payload["breakdown"]["feasible"] is True

    def test_ample_capacity_is_phase_one(self):
        payload = json.loads(CliRunner().invoke(main, ["plan"]).output)
        assert payload["plan"]["p1"] == payload["plan"]["p2"] == 16

    def test_infeasible(self, tmp_path):
        result = CliRunner().invoke(main, ["plan", "--config", write_config(tmp_path, {"scheduling": {"device_capacity": 10}})])
        assert result.exit_code == EXIT_INFEASIBLE


def parse_sweep(text):
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    assert header[0] == "swakv.sweep/v1"
    return [dict(zip(header[1:], r[1:])) for r in rows[1:]]


class TestSweepCommand:
    def test_ratio_axis_transfer_monotone(self, tmp_path):
        data = json.loads(json.dumps(CONSTRAINED))
        data["scheduling"]["device_capacity"] = 24 * 128
        cfg = write_config(tmp_path, data)
        result = CliRunner().invoke(main, ["sweep", "--config", cfg, "--axis", "ratio", "--values", "0.2,0.4,0.6"])
        rows = parse_sweep(result.output)
        moved = [float(r["transferred_bytes"]) for r in rows]
        assert all(r["status"] == "ok" for r in rows)
        assert moved == sorted(moved)

    def test_batch_axis_oom_narrative(self, tmp_path):
        data = json.loads(json.dumps(CONSTRAINED))
        data["scheduling"]["device_capacity"] = 48 * 128
        cfg = write_config(tmp_path, data)
        result = CliRunner().invoke(
            main, ["sweep", "--config", cfg, "--axis", "batch", "--values", "1,2",
                   "--policies", "dynamic,all_device", "--jobs", "2"]
        )
        assert result.exit_code == 0
        rows = {(r["value"], r["policy"]): r for r in parse_sweep(result.output)}
        assert rows[("1", "all_device")]["status"] == "ok"
        assert rows[("2", "all_device")]["error"] == "OutOfDeviceMemory"
        assert rows[("2", "dynamic")]["status"] == "ok"

    def test_failed_points_do_not_stop_sweep(self, tmp_path):
        cfg = write_config(tmp_path, CONSTRAINED)
        rows = parse_sweep(CliRunner().invoke(main, ["sweep", "--config", cfg, "--axis", "capacity",
                                                     "--values", "0,2048,4096"]).output)
        assert [r["status"] for r in rows] == ["failed", "ok", "ok"]

    def test_single_point_matches_run(self):
        cfg = RunConfig.from_dict(CONSTRAINED)
        row = sweep_rows(cfg, "ratio", [0.5], ["dynamic"])[0]
        m = run_inference(cfg)
        assert row["total_s"] == m.totals["total_seconds"]
        assert row["transferred_bytes"] == m.transferred_bytes

    def test_parallel_equals_serial(self):
        cfg = RunConfig.from_dict(CONSTRAINED)
        assert sweep_rows(cfg, "bandwidth", [1e5, 1e7], ["dynamic", "static"], jobs=2) == sweep_rows(
            cfg, "bandwidth", [1e5, 1e7], ["dynamic", "static"], jobs=1
        )

    def test_writes_file(self, tmp_path):
        CliRunner().invoke(main, ["sweep", "--axis", "batch", "--values", "1", "--out", str(tmp_path)])
        assert (tmp_path / "sweep.csv").read_text().startswith("swakv.sweep/v1,")


class TestAnalyzeCommand:
    def test_report(self, tmp_path):
        cfg = write_config(tmp_path, {"model": {"skew": 4.0}, "workload": {"n": 16}})
        result = CliRunner().invoke(main, ["analyze", "--config", cfg, "--ratios", "0.4", "--seeds", "2"])
        payload = json.loads(result.output)
        summary = payload["summary"]
        assert summary["dense@1"]["mean_rho"] == 1.0
        assert summary["swa@0.4"]["mean_rho"] > summary["local@0.4"]["mean_rho"]
        cells = [x for run in payload["runs"] for v in run["variants"] for row in v["sparsity"] for x in row]
        cells += [x for run in payload["runs"] for x in run["dense"]["prefill_sparsity"]]
        assert cells and all(0.0 <= x <= 1.0 for x in cells)


class TestBenchCommand:
    def test_prints_fit(self):
        result = CliRunner().invoke(main, ["bench", "--repeats", "1"])
        assert result.exit_code == 0
        fit = json.loads(result.output)["wall_clock"]
        assert fit["mac_rate"] > 0
        assert all(p["residual"] >= 0 for p in fit["points"])
