import csv
import json
import math

import pytest

from zaremba import cli


def write_spec(tmp_path, body, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"version": 1, **body}))
    return path


def run(tmp_path, command, body, *extra, out="out"):
    spec = write_spec(tmp_path, body)
    code = cli.main([command, "--spec", str(spec), "--out", str(tmp_path / out), *extra])
    report = tmp_path / out / "report.json"
    return code, (json.loads(report.read_text()) if report.exists() else None)


LINEAR = {"p": 3.0, "domain": {"cylinder": {"height": 2.0, "lid": "dirichlet"}},
          "dirichlet_data": {"kind": "linear", "a": 1.0, "b": 0.0}}


def test_linear_solve(tmp_path):
    code, rep = run(tmp_path, "solve", LINEAR)
    assert code == 0 and rep["status"] == "ok" and rep["solve"]["converged"]
    with open(tmp_path / "out" / "solution.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert max(abs(float(r["value"]) - float(r["y"])) for r in rows) <= 1e-6
    assert (tmp_path / "out" / "sections.csv").exists()
    assert (tmp_path / "out" / "mesh").is_dir()


def test_invalid_p_names_the_field(tmp_path, capsys):
    code, rep = run(tmp_path, "solve", LINEAR, "--override", "p=0.5")
    assert code == 2 and rep is None
    assert "'p'" in capsys.readouterr().err


@pytest.mark.parametrize("body", [
    {**LINEAR, "unknown": 1},
    {**LINEAR, "map": {"kind": "exp_dir", "q0": [0.9, 0.0]}, "p": 2.0},
    {**LINEAR, "map": {"kind": "exp_dir", "q0": [0.1, 0.0]}},
    {**LINEAR, "mesh": {"sectors": 7}},
    {**LINEAR, "solver": {"epsilon_schedule": [1e-3, 1e-2]}},
    {**LINEAR, "dirichlet_set": [{"kind": "lateral", "t0": 2.0, "t1": 1.0}]},
    {**LINEAR, "domain": {}},
    {**LINEAR, "version": 2},
])
def test_invalid_specs_exit_2(tmp_path, body):
    assert run(tmp_path, "solve", body)[0] == 2


def test_malformed_json_reports_position(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"version": 1,\n  "p": }')
    assert cli.main(["solve", "--spec", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_override_parsing():
    raw = cli.apply_overrides({"version": 1}, ["mesh.h=0.05", "domain.cylinder.lid=natural", "seed=3"])
    spec = cli.ProblemSpec.model_validate(raw)
    assert spec.mesh.h == 0.05 and spec.domain.cylinder.lid == "natural" and spec.seed == 3


def test_spec_round_trip(tmp_path):
    spec = cli.load_spec(write_spec(tmp_path, LINEAR))
    again = cli.ProblemSpec.model_validate_json(json.dumps(spec.model_dump(mode="json")))
    assert again == spec


def test_dumps_is_deterministic_and_exact():
    text = cli.dumps({"b": 0.1, "a": [1, math.inf, math.nan], "c": None})
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text)["b"] == 0.1
    assert '"inf"' in text and '"nan"' in text


def test_solver_failure_exit_3_with_partial_report(tmp_path):
    body = {**LINEAR, "dirichlet_data": {"kind": "sine_exp"}, "solver": {"max_iter": 1}}
    code, rep = run(tmp_path, "solve", body)
    assert code == 3
    assert rep["status"] == "solver_failure" and "partial" in rep["error"]


def test_classify_from_sections(tmp_path):
    body = {"p": 2.0, "domain": {"cylinder": {"height": 4.0}}, "dirichlet_data": {"kind": "sine_exp"}}
    assert run(tmp_path, "solve", body, out="a")[0] == 0
    code, rep = run(tmp_path, "classify", body, "--sections", str(tmp_path / "a" / "sections.csv"), out="b")
    assert code == 0 and rep["trichotomy"]["verdict"]["kind"] == "SignChanging"


def test_classify_solves_when_no_sections_given(tmp_path):
    body = {"p": 2.0, "domain": {"cylinder": {"height": 4.0, "lid": "natural"}},
            "dirichlet_data": {"kind": "linear", "a": 0.0, "b": 2.0}}
    code, rep = run(tmp_path, "classify", body)
    assert code == 0 and rep["trichotomy"]["verdict"]["kind"] == "Limit"
    assert rep["trichotomy"]["verdict"]["u_inf"] == pytest.approx(2.0)


def test_nodal_data(tmp_path):
    assert run(tmp_path, "solve", LINEAR, out="a")[0] == 0
    body = {**LINEAR, "dirichlet_data": {"kind": "nodal", "path": str(tmp_path / "a" / "solution.csv")}}
    code, rep = run(tmp_path, "solve", body, out="b")
    assert code == 0
    a = (tmp_path / "a" / "solution.csv").read_text()
    b = (tmp_path / "b" / "solution.csv").read_text()
    assert a == b


def test_capacity_scenarios(tmp_path):
    code, rep = run(tmp_path, "capacity", {"capacity": {"kind": "condenser", "rho": math.exp(-1)}}, out="c")
    assert code == 0
    assert rep["capacity"]["value"] == pytest.approx(rep["capacity"]["oracle"], rel=0.02)
    code, rep = run(tmp_path, "capacity", {"capacity": {"kind": "neumann", "t": 2.0},
                                            "dirichlet_set": [{"kind": "slab", "t0": 2.0, "t1": 3.0}]}, out="n")
    assert code == 0 and rep["capacity"]["value"] == pytest.approx(2.0, rel=0.02)
    assert run(tmp_path, "capacity", {"capacity": {"kind": "condenser", "rho": 2.0}}, out="x")[0] == 2


def test_wiener_scenario(tmp_path):
    body = {"dirichlet_set": [{"kind": "base"}, {"kind": "lateral", "t0": 0.0, "t1": 40.0}]}
    code, rep = run(tmp_path, "wiener", body)
    assert code == 0 and rep["wiener"]["verdict"] == "Regular"
    with open(tmp_path / "out" / "wiener.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 9


def test_verify_map_reports_violation_kinds(tmp_path):
    body = {"map": {"kind": "exp_dir", "q0": [0.5, 0.0]}, "verify": {"sample_count": 2000}}
    code, rep = run(tmp_path, "verify-map", body)
    assert code == 0
    v = rep["verify"]
    assert set(v) == {"map", "pushforward", "angular"}
    assert all(k.startswith("homogeneity") for k in v["map"]["violations"])
    code, rep = run(tmp_path, "verify-map", {"p": 3.0, "verify": {"sample_count": 2000}}, out="pl")
    assert rep["verify"]["map"]["ok"] and rep["verify"]["pushforward"]["ok"]


def test_ball_solve(tmp_path):
    body = {"domain": {"ball": {"height": 2.0}}, "dirichlet_data": {"kind": "sine_exp"},
            "mesh": {"rings": 20, "sectors": 32}}
    code, rep = run(tmp_path, "solve", body)
    assert code == 0 and rep["solve"]["converged"]


def test_reports_are_byte_identical(tmp_path):
    body = {"p": 1.5, "domain": {"cylinder": {"height": 2.0}}, "dirichlet_data": {"kind": "sine_exp"}}
    assert run(tmp_path, "solve", body, out="r1")[0] == 0
    assert run(tmp_path, "solve", body, out="r2")[0] == 0
    assert (tmp_path / "r1" / "report.json").read_bytes() == (tmp_path / "r2" / "report.json").read_bytes()
    assert (tmp_path / "r1" / "solution.csv").read_bytes() == (tmp_path / "r2" / "solution.csv").read_bytes()
