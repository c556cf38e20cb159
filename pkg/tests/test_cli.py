import json
from pathlib import Path

import pytest

from lcoupling import cli, lgeo

ROOT = Path(__file__).resolve().parents[1]


def run(tmp_path, *args):
    return cli.main(list(args) + ["--out", str(tmp_path)])


def test_default_geodesic(tmp_path, capsys):
    assert run(tmp_path, "geodesic") == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "L = 0.5" in out.splitlines()[0]
    d = json.loads((tmp_path / "geodesic.json").read_text())
    assert d["action"] == pytest.approx(0.5)


def test_same_point_geodesic(tmp_path, capsys):
    assert run(tmp_path, "geodesic", "--set", "geodesic.y=[0, 0]") == 0
    assert capsys.readouterr().out.splitlines()[0] == "L = 0"


def test_sphere_geodesic_via_flow_override(tmp_path, capsys):
    code = run(tmp_path, "geodesic", "--set",
               'flow={"kind": "RoundSphere", "dim": 2, "params": {"r0": 1.0}, '
               '"tau_min": 1.0, "tau_max": 8.0}')
    assert code == 0
    assert capsys.readouterr().out.startswith("L = ")


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(tmp_path, "geodesic", "--config", str(bad)) == cli.EXIT_CONFIG
    assert run(tmp_path, "geodesic", "--set", "geodesic.nope=1") == cli.EXIT_CONFIG
    assert run(tmp_path, "experiment", "--set",
               "experiment.checkpoints=[1.0, 1.001]") == cli.EXIT_CONFIG
    assert run(tmp_path, "geodesic", "--set", "geodesic.tau2=0.5") == cli.EXIT_CONFIG
    assert run(tmp_path, "verify", "--trials", "-1") == cli.EXIT_CONFIG


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise lgeo.SolverError("no start converged")
    monkeypatch.setattr(lgeo, "solve_min_lgeodesic", boom)
    assert run(tmp_path, "geodesic", "--set",
               'flow={"kind": "RoundSphere", "dim": 2, "params": {"r0": 1.0}, '
               '"tau_min": 1.0, "tau_max": 8.0}') == cli.EXIT_SOLVER


def test_walk_csv_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "walk", "--seed", "9", "--set", "walk.max_steps=12") == 0
    assert run(b, "walk", "--seed", "9", "--set", "walk.max_steps=12") == 0
    ta = (a / "walk.csv").read_bytes()
    assert ta == (b / "walk.csv").read_bytes()
    assert len(ta.decode().strip().splitlines()) == 14


def test_walk_zero_steps(tmp_path):
    assert run(tmp_path, "walk", "--set", "walk.max_steps=0") == 0
    assert len((tmp_path / "walk.csv").read_text().strip().splitlines()) == 2


def test_transport_command(tmp_path, capsys):
    assert run(tmp_path, "transport") == 0
    d = json.loads((tmp_path / "transport.json").read_text())
    assert d["gram_drift"] <= 1e-10


def test_experiment_outputs(tmp_path):
    code = run(tmp_path, "experiment", "--set", "experiment.replicas=50",
               "--set", "experiment.checkpoints=[1.0, 1.0025, 1.005]")
    assert code in (cli.EXIT_OK, cli.EXIT_ASSERT)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert (code == 0) == rep["pass"]
    assert (tmp_path / "report.csv").exists()
    assert (tmp_path / "report.svg").read_text().lstrip().startswith("<?xml")


def test_experiment_failed_criterion_exit(tmp_path, monkeypatch):
    from lcoupling import harness
    orig = harness.run_experiment

    def failing(spec, workers=1):
        rep = orig(spec, workers)
        rep.passed = False
        return rep
    monkeypatch.setattr(harness, "run_experiment", failing)
    code = run(tmp_path, "experiment", "--set", "experiment.replicas=5",
               "--set", "experiment.checkpoints=[1.0, 1.0025]")
    assert code == cli.EXIT_ASSERT


def test_experiment_bytes_independent_of_workers(tmp_path):
    outs = []
    for w in (1, 3):
        d = tmp_path / f"w{w}"
        assert run(d, "experiment", "--workers", str(w), "--set",
                   "experiment.replicas=40", "--set",
                   "experiment.checkpoints=[1.0, 1.0025, 1.005]") in (0, 3)
        outs.append(((d / "report.json").read_bytes(), (d / "report.svg").read_bytes()))
    assert outs[0] == outs[1]


def test_verify_zero_trials(tmp_path):
    assert run(tmp_path, "verify", "--trials", "0") == 0


def test_verify_torus(tmp_path):
    assert run(tmp_path, "verify", "--flow", "torus", "--trials", "3") == 0
    d = json.loads((tmp_path / "verify.json").read_text())
    assert d


def test_schema_copy_matches_docs():
    pkg = json.loads((ROOT / "src/lcoupling/config.schema.json").read_text())
    docs = json.loads((ROOT / "docs/config.schema.json").read_text())
    assert pkg == docs
    assert cli.schema() == pkg
