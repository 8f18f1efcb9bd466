import csv
import io
import json
from importlib import resources

import numpy as np
import pytest

from mfm import io as sio
from mfm.cli import main
from mfm.stackelberg import enumerate_solution


def fixture_path(name):
    return str(resources.files("mfm") / "scenarios" / f"{name}.json")


def fixture(name):
    return json.loads(open(fixture_path(name)).read())


def read_json(path):
    return json.loads(path.read_text())


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


# -- loader ---------------------------------------------------------------------------------------


def test_bundled_linear_scenario_loads_and_validates():
    scn = sio.load_scenario(fixture_path("decoupled_linear"))
    rep = sio.validate_scenario(scn)
    assert rep["compatibility"].passed and rep["slll"].passed


def test_every_bundled_file_loads():
    names = [p.name[:-5] for p in (resources.files("mfm") / "scenarios").iterdir() if p.name.endswith(".json")]
    assert len(names) >= 14
    for name in names:
        sio.load_scenario(fixture_path(name))


def test_missing_key_names_pointer():
    obj = fixture("decoupled_linear")
    del obj["y0"]
    with pytest.raises(sio.ScenarioError) as err:
        sio.scenario_from_json(obj)
    assert err.value.pointer == "/y0"


def test_wrong_marginal_reports_w1_gap():
    obj = fixture("decoupled_linear")
    obj["alpha"]["atoms"][0]["x0"] = [obj["alpha"]["atoms"][0]["x0"][0] + 0.5]
    with pytest.raises(sio.ScenarioError) as err:
        sio.scenario_from_json(obj)
    assert err.value.kind == "validation" and err.value.pointer == "/alpha"
    assert "W_1 gap 0.05" in str(err.value)


def test_scenario_round_trip():
    scn = sio.load_scenario(fixture_path("bench_coupled_2d"))
    again = sio.scenario_from_json(json.loads(sio.dumps(sio.scenario_to_json(scn))))
    assert np.array_equal(again.alpha.kernels(), scn.alpha.kernels())
    assert again.m0.equals(scn.m0) and np.array_equal(again.y0, scn.y0)


def test_motion_json_round_trip():
    from mfm.solver import delayed_euler_solve

    mo = delayed_euler_solve(sio.load_scenario(fixture_path("decoupled_linear")), 8)
    back = sio.motion_from_json(json.loads(sio.dumps(sio.motion_json(mo))))
    assert np.array_equal(back.y, mo.y) and np.array_equal(back.chi.curves, mo.chi.curves)


# -- commands -------------------------------------------------------------------------------------------


def test_simulate_zero_dynamics_gives_constant_y(tmp_path):
    assert main(["simulate", "--scenario", fixture_path("zero_dynamics"), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "motion.csv").read_text())))
    assert len(rows) > 1
    assert {r["y_0"] for r in rows} == {rows[0]["y_0"]}
    assert float(rows[0]["y_0"]) == 0.5
    assert (tmp_path / "motion.json").exists()


def test_simulate_emit_only_csv(tmp_path):
    assert main(["simulate", "--scenario", fixture_path("zero_dynamics"), "--out", str(tmp_path), "--emit", "csv"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["motion.csv"]


def test_stability_two_scales_two_rows(tmp_path):
    rc = main(["stability", "--scenario", fixture_path("perturb_y0"), "--out", str(tmp_path), "--scales", "1,0.5"])
    assert rc == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3
    rep = read_json(tmp_path / "key_estimate.json")
    assert len(rep["rows"]) == 2 and all(r["key_estimate"]["pass"] for r in rep["rows"])


def test_stability_perturbation_from_separate_file(tmp_path):
    pert = write(tmp_path, "p.json", {"dy0": [0.2]})
    out = tmp_path / "out"
    rc = main(["stability", "--scenario", fixture_path("bench_coupled_1d"), "--perturbation", pert, "--out", str(out), "--scales", "1"])
    assert rc == 0 and (out / "sweep.csv").exists()


def test_stability_without_perturbation_is_schema_error(tmp_path):
    rc = main(["stability", "--scenario", fixture_path("bench_coupled_1d"), "--out", str(tmp_path)])
    assert rc == 2
    assert read_json(tmp_path / "error.json")["pointer"] == "/perturbation"


def test_stackelberg_two_by_two_matches_enumeration(tmp_path):
    assert main(["stackelberg", "--scenario", fixture_path("game_2x2"), "--out", str(tmp_path)]) == 0
    sol = read_json(tmp_path / "solution.json")
    SF = np.array([t["sigma_F"] for t in sol["table"]]).T
    SL = np.array([t["sigma_L"] for t in sol["table"]]).T
    assert enumerate_solution(SF, SL, sol["tie_tol"]) == (sol["zeta_star"], sol["alpha_star"])
    assert len((tmp_path / "payoffs.csv").read_text().splitlines()) == 5


def test_metrics_report(tmp_path):
    assert main(["metrics", "--out", str(tmp_path), "--trials", "20"]) == 0
    rep = read_json(tmp_path / "metrics.json")
    assert rep["passed"] and set(rep["checks"]) == {"wasserstein_axioms", "narrow_axioms", "transport_oracle", "lipschitz_approx"}


def test_missing_key_exit_code_and_pointer(tmp_path):
    obj = fixture("decoupled_linear")
    del obj["y0"]
    rc = main(["simulate", "--scenario", write(tmp_path, "bad.json", obj), "--out", str(tmp_path)])
    assert rc == 2
    err = read_json(tmp_path / "error.json")
    assert err["pointer"] == "/y0" and err["status"] == 2


def test_bad_resolution_is_validation_failure(tmp_path):
    assert main(["simulate", "--scenario", fixture_path("zero_dynamics"), "--out", str(tmp_path), "--n", "0"]) == 2
    assert main(["simulate", "--scenario", fixture_path("zero_dynamics"), "--out", str(tmp_path), "--n", "70000"]) == 2


def test_unknown_emit_format(tmp_path):
    assert main(["simulate", "--scenario", fixture_path("zero_dynamics"), "--out", str(tmp_path), "--emit", "xml"]) == 2


def test_non_convergence_exit_code(tmp_path):
    rc = main(["simulate", "--scenario", fixture_path("bench_coupled_1d"), "--out", str(tmp_path), "--max-iter", "2"])
    assert rc == 3
    err = read_json(tmp_path / "error.json")
    assert err["kind"] == "no_convergence" and err["residual"] > 0


def test_unreadable_json(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["simulate", "--scenario", str(p), "--out", str(tmp_path)]) == 2


def test_game_file_rejected_by_simulate(tmp_path):
    assert main(["simulate", "--scenario", fixture_path("game_2x2"), "--out", str(tmp_path)]) == 2


def test_repeated_runs_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["stackelberg", "--scenario", fixture_path("game_3x3"), "--out", str(tmp_path / d)]) == 0
        assert main(["simulate", "--scenario", fixture_path("bench_mixed_2d"), "--out", str(tmp_path / d / "sim")]) == 0
    for name in ("solution.json", "payoffs.csv", "sim/motion.csv", "sim/motion.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
