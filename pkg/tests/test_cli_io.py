import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from capflow.cli import run_command
from capflow.diagnostics import DiagnosticsRow
from capflow.flow import FlowConfig, run
from capflow.geometry import build_grid
from capflow.io import ConfigError, config_from_text, emit_outputs, load_config, read_snapshot, read_timeseries, write_timeseries

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

MINIMAL = {"theta": 1.0, "n": 1, "grid": {"n_rho": 50}, "phi": {"kind": "power", "p": 3}, "f": "1", "h0": {"scale": 0.8}}


def write_cfg(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2) if isinstance(data, dict) else data)
    return p


class TestLoadConfig:
    def test_minimal_defaults(self, tmp_path):
        cfg = load_config(write_cfg(tmp_path, MINIMAL))
        assert cfg.flow.t_max == 20.0 and cfg.flow.tol_residual == 1e-6 and cfg.flow.cadence == 1
        assert cfg.snapshot_cadence == 0 and cfg.mesh is False and cfg.seed == 0
        assert "t_max" in cfg.defaults_used

    def test_theta_range(self):
        with pytest.raises(ConfigError, match=r"\(0, pi/2\)") as info:
            config_from_text(json.dumps({**MINIMAL, "theta": 2.0}))
        assert info.value.pointer == "/theta"

    def test_f_offset(self):
        with pytest.raises(ConfigError) as info:
            config_from_text(json.dumps({**MINIMAL, "f": "1+*2"}))
        assert info.value.offset == 2 and info.value.pointer == "/f"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="nonsense"):
            config_from_text(json.dumps({**MINIMAL, "nonsense": 1}))

    def test_nested_pointer(self):
        with pytest.raises(ConfigError) as info:
            config_from_text(json.dumps({**MINIMAL, "grid": {"n_rho": 4}}))
        assert info.value.pointer == "/grid/n_rho"

    def test_n_phi_required(self):
        with pytest.raises(ConfigError, match="n_phi"):
            config_from_text(json.dumps({**MINIMAL, "n": 2}))

    def test_bad_json(self):
        with pytest.raises(ConfigError, match="not valid JSON"):
            config_from_text("{ theta: 1 }")

    def test_unknown_variable_in_f(self):
        with pytest.raises(ConfigError, match="unknown"):
            config_from_text(json.dumps({**MINIMAL, "f": "1 + y"}))

    def test_seed_override(self, tmp_path):
        assert load_config(write_cfg(tmp_path, MINIMAL), seed=9).flow.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.json")

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.name)
    def test_shipped_configs_valid(self, path):
        load_config(path)


def _row(k):
    return DiagnosticsRow(*[k + 0.1 * i + 1e-17 * (i % 3) for i in range(17)])


def test_timeseries_round_trip(tmp_path):
    rows = [_row(k) for k in range(5)]
    rows[2].dt = 1 / 3
    write_timeseries(tmp_path / "ts.csv", rows)
    assert read_timeseries(tmp_path / "ts.csv") == rows
    header = (tmp_path / "ts.csv").read_text().splitlines()[0].split(",")
    assert header == DiagnosticsRow.header()


@pytest.fixture(scope="module")
def stationary_outputs(tmp_path_factory):
    out = tmp_path_factory.mktemp("stationary")
    text = json.dumps(
        {
            "theta": math.pi / 3, "n": 2, "grid": {"n_rho": 64, "n_phi": 128}, "phi": {"kind": "power", "p": 3}, "f": "1",
            "h0": {"scale": 1.0}, "tol_residual": 1e-14, "cadence": 10, "max_steps": 100, "t_max": 1000.0, "dt_max": 0.01,
            "snapshot_cadence": 50, "mesh": True,
        },
        indent=1,
    ) + "\n  \n"
    cfg = config_from_text(text)
    report = run(cfg.flow, snapshot_every=cfg.snapshot_cadence)
    emit_outputs(report, cfg, out)
    return out, cfg, report


class TestEmit:
    def test_cadence_rows(self, stationary_outputs):
        out, _, report = stationary_outputs
        rows = read_timeseries(out / "timeseries.csv")
        assert report.n_steps == 100 and len(rows) == 10
        J = np.array([r.J for r in rows])
        assert np.ptp(J) < 1e-8

    def test_report_echoes_config(self, stationary_outputs):
        out, cfg, report = stationary_outputs
        raw = (out / "report.json").read_text(encoding="utf-8")
        assert cfg.text.strip("\n") in raw
        data = json.loads(raw)
        assert data["config"] == json.loads(cfg.text)
        assert data["status"] == report.status and data["steps"] == 100
        assert set(data["condition"]) >= {"passes", "margin_low", "margin_high"}

    def test_snapshots_and_meshes(self, stationary_outputs):
        out, cfg, report = stationary_outputs
        assert sorted(p.name for p in out.glob("snap_*.csv")) == ["snap_0.csv", "snap_1.csv", "snap_2.csv"]
        assert len(list(out.glob("mesh_*.obj"))) == 3
        h = read_snapshot(out / "snap_2.csv", report.grid)
        assert np.array_equal(h, report.state.h)
        cols = (out / "snap_0.csv").read_text().splitlines()[0]
        assert cols == "rho,phi_angle,h,K,residual"

    def test_mesh_on_sphere(self, stationary_outputs):
        out, cfg, report = stationary_outputs
        verts = np.array([[float(x) for x in ln.split()[1:]] for ln in (out / "mesh_0.obj").read_text().splitlines() if ln.startswith("v ")])
        centre = np.array([0.0, 0.0, -math.cos(math.pi / 3)])
        dist = np.linalg.norm(verts - centre, axis=1)
        assert np.max(np.abs(dist - 1.0)) < 10 * report.grid.d_rho**2

    def test_snapshot_size_checked(self, stationary_outputs):
        out, _, _ = stationary_outputs
        with pytest.raises(ValueError, match="rows"):
            read_snapshot(out / "snap_0.csv", build_grid(math.pi / 3, 2, 16, 32))


class TestCli:
    def test_oracle(self, capsys):
        assert run_command(["oracle", "--p", "3", "--f", "1", "--u0", "0.5", "--n", "1", "--t", "0.693147"]) == 0
        assert capsys.readouterr().out.strip() == "0.666667"

    def test_oracle_expr(self, capsys):
        assert run_command(["oracle", "--phi", "s^(-2)", "--f", "1", "--u0", "1", "--n", "2", "--t", "3"]) == 0
        assert capsys.readouterr().out.strip() == "1.000000"

    def test_oracle_leaves_domain(self):
        assert run_command(["oracle", "--p", "1", "--f", "1", "--u0", "0.5", "--n", "1", "--t", "2"]) == 4

    def test_check_condition(self, capsys):
        assert run_command(["check-condition", "--config", str(CONFIGS / "p1.json")]) == 1
        assert json.loads(capsys.readouterr().out)["passes"] is False
        assert run_command(["check-condition", "--config", str(CONFIGS / "logistic.json")]) == 0

    def test_invalid_config_exit(self, tmp_path):
        assert run_command(["check-condition", "--config", str(write_cfg(tmp_path, {**MINIMAL, "theta": 2.0}))]) == 3
        assert run_command(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3

    def test_bad_arguments_exit(self):
        assert run_command(["oracle", "--p", "3"]) == 3
        assert run_command(["frobnicate"]) == 3

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        cfg = write_cfg(tmp_path, {**MINIMAL, "t_max": 0.01})
        assert run_command(["run", "--quiet", "--config", str(cfg), "--out", str(blocker / "sub")]) == 5

    def test_run_horizon_and_residual(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {**MINIMAL, "t_max": 0.05})
        assert run_command(["run", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        capsys.readouterr()
        assert run_command(["residual", "--config", str(cfg), "--snapshot", str(tmp_path / "o" / "snap_1.csv")]) == 0
        res = json.loads(capsys.readouterr().out)
        assert res["max_norm"] > 0 and res["l2_norm"] > 0

    def test_run_breakdown(self, tmp_path):
        cfg = write_cfg(tmp_path, {**MINIMAL, "phi": {"kind": "power", "p": 1}, "h0": {"scale": 0.5}, "t_max": 5})
        assert run_command(["run", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4

    def test_threads_env(self, tmp_path):
        cfg = write_cfg(tmp_path, {**MINIMAL, "t_max": 0.01})
        env_ok = {"CAPFLOW_THREADS": "1", "PYTHONPATH": str(ROOT / "src")}
        proc = subprocess.run([sys.executable, "-m", "capflow", "run", "--quiet", "--config", str(cfg), "--out", str(tmp_path / "o")], env=env_ok, capture_output=True)
        assert proc.returncode == 2
        env_bad = {"CAPFLOW_THREADS": "many", "PYTHONPATH": str(ROOT / "src")}
        proc = subprocess.run([sys.executable, "-m", "capflow", "check-condition", "--config", str(cfg)], env=env_bad, capture_output=True, text=True)
        assert proc.returncode == 3 and "CAPFLOW_THREADS" in proc.stderr
