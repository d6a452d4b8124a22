import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from arrivaltime.cli import EXIT_CONFIG, EXIT_FLAG, EXIT_OK, EXIT_SOLVER, main
from arrivaltime.config import ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

DISK = {
    "chart": {"kind": "euclidean", "dim": 2},
    "domain": {"kind": "ball", "radius": 1.0},
    "grid": {"h": 1 / 32},
    "solve": {"eps": 0.1, "sigma": 0.1},
    "schedule": {"eps0": 0.2, "eps_min": 0.1, "sigma_min": 1e-2},
    "converge": {"h_list": [1 / 16, 1 / 32, 1 / 64]},
    # eps_min = 0.1 keeps this config fast; its regularization error is about 0.03
    "oracle": {"tolerance": 0.05},
}

NECK = {
    "chart": {"kind": "revolution", "expression": "cosh"},
    "domain": {"kind": "band", "half_width": 1.0},
    "grid": {"h": 1 / 256, "periodic_points": 16},
    "schedule": {"eps0": 0.1, "eps_min": 0.05, "sigma_min": 1e-4, "u_cut": 2.5},
}


def _write(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def _run(cmd, cfg_path, out, *extra):
    return main([cmd, "--config", str(cfg_path), "--out", str(out), *extra])


def _patched(base, **sections):
    data = json.loads(json.dumps(base))
    for k, v in sections.items():
        data.setdefault(k, {}).update(v)
    return data


# -- configuration ------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["disk", "hyperbolic", "neck", "dumbbell"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    assert parse_config(cfg.to_dict()).to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "data",
    [
        _patched(DISK, solve={"sigma": 0.0}),
        _patched(DISK, grid={"h": 3.0}),
        _patched(DISK, grid={"colour": 1}),
        {**DISK, "extra": {}},
        {"domain": DISK["domain"]},
        _patched(DISK, chart={"kind": "lorentzian"}),
        _patched(DISK, schedule={"u_cut": 1e9}),
    ],
    ids=["sigma0", "h-too-large", "unknown-key", "unknown-section", "no-chart", "bad-chart", "cut"],
)
def test_invalid_configs_exit_2(tmp_path, data):
    assert _run("solve", _write(tmp_path, data), tmp_path / "o") == EXIT_CONFIG


def test_malformed_yaml_exits_2(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("chart: {kind: euclidean\n  dim: [")
    assert _run("solve", path, tmp_path / "o") == EXIT_CONFIG
    assert _run("solve", tmp_path / "missing.yaml", tmp_path / "o") == EXIT_CONFIG


def test_exponent_floats_without_point(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("chart: {kind: euclidean}\ndomain: {kind: ball}\nschedule: {sigma_min: 1e-3, tol_abs: 1e-10}\n")
    cfg = load_config(path)
    assert cfg.schedule.sigma_min == 1e-3 and cfg.schedule.tol_abs == 1e-10


def test_threads_must_be_positive(tmp_path):
    assert _run("solve", _write(tmp_path, DISK), tmp_path / "o", "--threads", "0") == EXIT_CONFIG


def test_geodesic_radius_needs_poincare():
    with pytest.raises(ConfigError):
        parse_config(_patched(DISK, domain={"geodesic": True})).build_domain()


# -- solve ---------------------------------------------------------------------------------


def test_solve_disk(tmp_path):
    out = tmp_path / "o"
    assert _run("solve", _write(tmp_path, DISK), out) == EXIT_OK
    summary = json.loads((out / "solve" / "summary.json").read_text())
    assert 0 < summary["u_center"] <= 100
    assert summary["sup_bound_ok"]
    rows = np.loadtxt(out / "solve" / "field.csv", delimiter=",", skiprows=1)
    centre = np.argmin(np.linalg.norm(rows[:, :2], axis=1))
    assert rows[centre, -1] == pytest.approx(summary["u_center"])
    assert list((out / "solve" / "checkpoints").glob("*.json"))


def test_solver_failure_exits_3(tmp_path):
    data = _patched(DISK, schedule={"max_iter": 1, "kappa_step": 0.25, "kappa_min_step": 0.25})
    out = tmp_path / "o"
    assert _run("solve", _write(tmp_path, data), out) == EXIT_SOLVER
    fail = json.loads((out / "solve" / "failure.json").read_text())
    assert fail["status"] == "failed"


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "arrivaltime", "solve", "--config", str(tmp_path / "none.yaml")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == EXIT_CONFIG
    assert "configuration error" in proc.stderr


# -- sweep / verify / oracle -------------------------------------------------------------


def test_verify_before_sweep(tmp_path, capsys):
    assert _run("verify", _write(tmp_path, DISK), tmp_path / "o") == EXIT_CONFIG
    assert "run sweep first" in capsys.readouterr().err


@pytest.fixture(scope="module")
def disk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("disk")
    cfg = _write(root, DISK)
    out = root / "o"
    codes = {cmd: _run(cmd, cfg, out) for cmd in ("sweep", "verify", "oracle")}
    return cfg, out, codes


def test_disk_sweep_verify_oracle(disk_run):
    _, out, codes = disk_run
    assert codes == {"sweep": EXIT_OK, "verify": EXIT_OK, "oracle": EXIT_OK}
    sweep = json.loads((out / "sweep" / "sweep.json").read_text())
    assert [r["eps"] for r in sweep["rungs"]] == [0.2, 0.1]
    assert all(r["monotone_ok"] for r in sweep["rungs"])
    report = json.loads((out / "verify" / "report.json").read_text())
    assert {"levels", "minH", "maxRatio", "fit", "rho_thm", "flags"} <= set(report)
    comp = json.loads((out / "oracle" / "comparison.json").read_text())
    assert comp["max_abs_error"] <= 0.05
    assert comp["max_abs_error_vs_regularized_1d"] <= 5 / 32
    header = (out / "oracle" / "table.csv").read_text().splitlines()[0]
    assert header.startswith("r,u,H")


def test_sweep_resumes_from_checkpoints(disk_run):
    cfg, out, _ = disk_run
    before = (out / "sweep" / "sweep.json").read_bytes()
    assert _run("sweep", cfg, out) == EXIT_OK
    assert (out / "sweep" / "sweep.json").read_bytes() == before


def test_deterministic_reports(disk_run, tmp_path):
    cfg, out, _ = disk_run
    again = tmp_path / "again"
    for cmd in ("sweep", "verify", "oracle"):
        assert _run(cmd, cfg, again) == EXIT_OK
    for rel in ("sweep/sweep.json", "verify/report.json", "oracle/comparison.json"):
        assert (again / rel).read_bytes() == (out / rel).read_bytes(), rel


def test_config_echo_round_trip(disk_run, tmp_path):
    cfg, out, _ = disk_run
    echo = out / "effective_config.json"
    assert _run("solve", cfg, tmp_path / "orig") == EXIT_OK
    assert _run("solve", echo, tmp_path / "redo") == EXIT_OK
    first = json.loads(echo.read_text())
    second = json.loads((tmp_path / "redo" / "effective_config.json").read_text())
    first.pop("output"), second.pop("output")
    assert first == second
    rel = Path("solve") / "field.csv"
    assert (tmp_path / "orig" / rel).read_bytes() == (tmp_path / "redo" / rel).read_bytes()


def test_oracle_disk_reference_config(tmp_path):
    out = tmp_path / "o"
    cfg = CONFIGS / "disk.yaml"
    assert _run("sweep", cfg, out) == EXIT_OK
    assert _run("oracle", cfg, out) == EXIT_OK
    comp = json.loads((out / "oracle" / "comparison.json").read_text())
    assert comp["max_abs_error"] <= 0.01


def test_oracle_without_case_exits_2(tmp_path):
    data = load_config(CONFIGS / "dumbbell.yaml").to_dict()
    assert _run("oracle", _write(tmp_path, data), tmp_path / "o") == EXIT_CONFIG


@pytest.fixture(scope="module")
def neck_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("neck")
    cfg = _write(root, NECK)
    out = root / "o"
    assert _run("sweep", cfg, out) == EXIT_OK
    return root, out


def test_neck_verify_rate(neck_run):
    root, out = neck_run
    assert _run("verify", root / "cfg.yaml", out) == EXIT_OK
    report = json.loads((out / "verify" / "report.json").read_text())
    assert 0.8 <= report["fit"]["rhoH"] <= 1.2
    assert report["flags"]["lower_H"] and report["flags"]["upper_ratio"]


def test_neck_verify_flags_fail_with_small_rho(neck_run):
    root, out = neck_run
    cfg = _write(root, _patched(NECK, curvature={"rho": 0.1}), "small_rho.yaml")
    assert _run("verify", cfg, out) == EXIT_FLAG
    report = json.loads((out / "verify" / "report.json").read_text())
    assert not report["flags"]["rate_H"]


# -- converge ---------------------------------------------------------------------------------


def test_converge_disk(tmp_path):
    out = tmp_path / "o"
    assert _run("converge", _write(tmp_path, DISK), out) == EXIT_OK
    doc = json.loads((out / "converge" / "eoc.json").read_text())
    eocs = [row["eoc"] for row in doc["h_table"] if row["eoc"] is not None]
    assert len(eocs) == 2
    assert all(0.8 <= q <= 2.2 for q in eocs)
    assert doc["reference"] == "radial_1d"


def test_converge_threads_match_serial(tmp_path):
    cfg = _write(tmp_path, _patched(DISK, converge={"h_list": [1 / 8, 1 / 16, 1 / 32]}))
    assert _run("converge", cfg, tmp_path / "a") == EXIT_OK
    assert _run("converge", cfg, tmp_path / "b", "--threads", "3") == EXIT_OK
    a = (tmp_path / "a" / "converge" / "eoc.json").read_bytes()
    b = (tmp_path / "b" / "converge" / "eoc.json").read_bytes()
    assert a == b
