"""Tests for the command-line entry point."""
import csv
import json
from typing import List

import pytest
from pydantic import TypeAdapter

from main import load_scenario, main, write_scenario
from voinet.models.schemas import AggregateReport, EpisodeSummary


@pytest.fixture
def scenario_file(tmp_path, make_scalar):
    def _write(**kwargs):
        path = tmp_path / "scenario.json"
        write_scenario(make_scalar(**kwargs), path)
        return str(path)

    return _write


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestValidateCommand:
    def test_preset_round_trip(self, tmp_path):
        assert main(["preset", "spacecraft", "--output-dir", str(tmp_path)]) == 0
        path = tmp_path / "spacecraft.json"
        assert path.exists()
        assert main(["validate", str(path)]) == 0
        assert load_scenario(str(path)).source.horizon == 1000

    def test_preset_name_loads_directly(self):
        assert main(["validate", "spacecraft"]) == 0

    def test_violations_are_printed(self, scenario_file, capsys):
        assert main(["validate", scenario_file(W=-1.0)]) == 1
        assert "source.W: W not positive definite" in capsys.readouterr().out

    def test_schema_mismatch(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{}")
        assert main(["validate", str(path)]) == 1

    def test_missing_file(self, tmp_path):
        assert main(["validate", str(tmp_path / "absent.json")]) == 2

    def test_unknown_flag(self, scenario_file):
        assert main(["run", scenario_file(), "--bogus"]) == 1

    def test_unknown_preset(self, tmp_path):
        assert main(["preset", "rover", "--output-dir", str(tmp_path)]) == 1

    def test_unknown_log_level(self, scenario_file, capsys):
        assert main(["--log-level", "BOGUS", "validate", scenario_file()]) == 1
        assert "unknown log level 'BOGUS'" in capsys.readouterr().err

    def test_unknown_log_level_from_environment(self, scenario_file, monkeypatch):
        monkeypatch.setenv("VOI_LOG_LEVEL", "chatty")
        assert main(["validate", scenario_file()]) == 1


class TestRunCommand:
    """Test trajectory and summary output."""

    def test_never_policy_phi_is_total_mse(self, scenario_file, tmp_path):
        out = tmp_path / "out"
        assert main(["run", scenario_file(horizon=10, theta=0.0), "--policy", "never", "--output-dir", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())[0]
        assert summary["sends"] == 0
        assert summary["phi"] == pytest.approx(summary["mse_total"])
        rows = _rows(out / "trajectory_never_seed0.csv")
        assert sum(float(r[6]) for r in rows[1:]) == pytest.approx(summary["mse_total"])

    def test_single_step_horizon(self, scenario_file, tmp_path):
        assert main(["run", scenario_file(horizon=1), "--policy", "always", "--output-dir", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "trajectory_always_seed0.csv")
        assert len(rows) == 3

    def test_header(self, scenario_file, tmp_path):
        main(["run", scenario_file(horizon=3), "--policy", "periodic:2", "--seed", "4", "--output-dir", str(tmp_path)])
        rows = _rows(tmp_path / "trajectory_periodic-2_seed4.csv")
        assert rows[0] == ["k", "sigma", "gamma", "delivered", "lambda", "voi", "mse", "x0", "xcheck0", "xhat0"]
        assert rows[1][0] == "0" and rows[1][1] == "1"

    def test_several_episodes(self, scenario_file, tmp_path):
        main(["run", scenario_file(horizon=5), "--policy", "never", "--episodes", "3", "--output-dir", str(tmp_path)])
        assert len(json.loads((tmp_path / "summary.json").read_text())) == 3
        assert (tmp_path / "trajectory_never_seed2.csv").exists()

    def test_summary_matches_schema(self, scenario_file, tmp_path):
        main(["run", scenario_file(horizon=5, loss=0.3), "--policy", "always", "--episodes", "2", "--output-dir", str(tmp_path)])
        summaries = TypeAdapter(List[EpisodeSummary]).validate_json((tmp_path / "summary.json").read_bytes())
        assert [s.seed for s in summaries] == [0, 1]
        assert all(s.sends == 5 for s in summaries)

    def test_fixed_seed_ten_slot_trajectory(self, scenario_file, tmp_path):
        path = scenario_file(horizon=10, loss=0.0, theta=0.5)
        for out in ("a", "b"):
            args = ["run", path, "--policy", "periodic:3", "--seed", "7", "--output-dir", str(tmp_path / out)]
            assert main(args) == 0
        golden = (tmp_path / "a" / "trajectory_periodic-3_seed7.csv").read_bytes()
        assert (tmp_path / "b" / "trajectory_periodic-3_seed7.csv").read_bytes() == golden

        rows = _rows(tmp_path / "a" / "trajectory_periodic-3_seed7.csv")[1:]
        assert [r[0] for r in rows] == [str(k) for k in range(11)]
        assert [r[1] for r in rows] == ["1", "0", "0", "1", "0", "0", "1", "0", "0", "1", "0"]
        assert [r[2] for r in rows] == ["1", "", "", "1", "", "", "1", "", "", "1", ""]
        assert [r[3] for r in rows] == ["0", "1", "0", "0", "1", "0", "0", "1", "0", "0", "1"]
        assert all(r[4] == "0" and r[5] == "" for r in rows)
        assert rows[0][9] == "0"
        for k in range(1, 11):
            # A = 1: a delivery copies the previous snapshot, otherwise the estimate is held
            source = rows[k - 1][8] if rows[k][3] == "1" else rows[k - 1][9]
            assert rows[k][9] == source
        for r in rows:
            assert float(r[6]) == pytest.approx((float(r[7]) - float(r[9])) ** 2, rel=1e-12, abs=1e-300)

        summary = json.loads((tmp_path / "a" / "summary.json").read_text())[0]
        assert summary["sends"] == 4 and summary["losses"] == 0
        assert summary["phi"] == pytest.approx(sum(float(r[6]) for r in rows) + 0.5 * 4)

    def test_worker_count_gives_identical_files(self, scenario_file, tmp_path):
        path = scenario_file(horizon=10, delay=2, loss=0.3, theta=0.5)
        outputs = []
        for workers in (1, 4, 16):
            out = tmp_path / f"w{workers}"
            args = ["run", path, "--policy", "voi", "--episodes", "6", "--workers", str(workers), "--output-dir", str(out)]
            assert main(args) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert len(outputs[0]) == 7
        assert outputs[1] == outputs[0]
        assert outputs[2] == outputs[0]

    def test_bad_selector(self, scenario_file, tmp_path):
        assert main(["run", scenario_file(), "--policy", "sometimes", "--output-dir", str(tmp_path)]) == 1

    def test_invalid_scenario(self, scenario_file, tmp_path):
        assert main(["run", scenario_file(V=0.0), "--output-dir", str(tmp_path)]) == 1


class TestSolveDpCommand:
    def test_value_function_export(self, scenario_file, tmp_path, monkeypatch):
        monkeypatch.setenv("VOI_DP_GRID_NODES", "11")
        assert main(["solve-dp", scenario_file(horizon=4), "--output-dir", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "value_function.csv")
        assert rows[0][:5] == ["k", "lambda_prev_state", "lambda_state", "sigma_prev", "etilde"]
        assert len(rows) == 1 + 4 * 11

    def test_vector_source_is_rejected(self, tmp_path):
        assert main(["solve-dp", "spacecraft", "--output-dir", str(tmp_path)]) == 1


class TestCompareCommand:
    def test_report_written(self, scenario_file, tmp_path):
        path = scenario_file(horizon=10, loss=0.2)
        assert main(["compare", path, "--policies", "always,never", "--episodes", "3", "--output-dir", str(tmp_path)]) == 0
        report = AggregateReport.model_validate_json((tmp_path / "report.json").read_text())
        assert [p.policy for p in report.policies] == ["always", "never"]
        assert report.seeds == [0, 1, 2]
        assert len(report.comparisons) == 1

    def test_needs_two_episodes(self, scenario_file, tmp_path):
        path = scenario_file(horizon=10)
        assert main(["compare", path, "--policies", "never", "--episodes", "1", "--output-dir", str(tmp_path)]) == 1
