import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from builders import V1, make_scenario
from mfm import io as sio
from mfm.controls import dirac_control
from mfm.solver import delayed_euler_solve
from mfm.stackelberg import (
    StackelbergError,
    StackelbergProblem,
    best_responses,
    enumerate_solution,
    evaluate_payoffs,
    parse_payoff,
    payoff_table,
    problem_from_json,
    problem_to_json,
    solve_from_table,
    solve_stackelberg,
    terminal_value,
)

X0 = ((-0.5,), (0.2,), (1.0,))


def fixture(name):
    return json.loads((resources.files("mfm") / "scenarios" / f"{name}.json").read_text())


def problem_from(scn, sigma_L, sigma_F, leaders, followers, N=64):
    return StackelbergProblem(
        scn.spec, scn.m0, scn.y0, scn.T, scn.p, scn.U, scn.V,
        parse_payoff(sigma_L, 1, 1), parse_payoff(sigma_F, 1, 1), leaders, followers, N=N,
    )


# -- payoffs ---------------------------------------------------------------------------------


def test_leader_payoff_of_linear_major_state():
    scn = make_scenario(g="v0", v_idx=1, y0=(0.3,))
    mo = delayed_euler_solve(scn, 16)
    assert terminal_value(parse_payoff("y0", 1, 1), mo) == pytest.approx(1.3, abs=1e-14)


def test_follower_payoff_of_frozen_population():
    scn = make_scenario(x0=X0, w=(0.2, 0.3, 0.5))
    mo = delayed_euler_solve(scn, 16)
    assert terminal_value(parse_payoff("mean(0)", 1, 1), mo) == pytest.approx(0.2 * -0.5 + 0.3 * 0.2 + 0.5, abs=1e-15)


def test_payoff_rejects_controls_and_minor_states():
    for src in ("u0", "x0", "v0"):
        with pytest.raises(StackelbergError):
            parse_payoff(src, 1, 1)
    with pytest.raises(StackelbergError):
        parse_payoff("mean(1)", 1, 1)


def test_pair_value_matches_independent_scheme_run():
    scn = make_scenario(
        f_I="-0.5*x0 + 0.5*u0 + 0.3*tanh(y0 - mean(0))", f_II="0.2*v0*cos(x0)", g="-0.5*y0 + 0.5*v0 + 0.2*sin(mean(0))",
        x0=X0, y0=(0.8,), u_idx=(0, 1, 2),
    )
    leaders = [dirac_control(V1, 0, 4), dirac_control(V1, 1, 4)]
    prob = problem_from(scn, "y0 - mean(0)", "-(mean(0) - y0)*(mean(0) - y0)", leaders, [scn.alpha], N=512)
    SF, SL = evaluate_payoffs(prob, 0, 1)
    mo = delayed_euler_solve(scn.with_(zeta=leaders[1]), 512)
    m, y = mo.terminal()
    mean = m.mean()[0]
    assert SL == pytest.approx(y[0] - mean, abs=1e-3)
    assert SF == pytest.approx(-((mean - y[0]) ** 2), abs=1e-3)


def test_out_of_range_pair():
    scn = make_scenario()
    prob = problem_from(scn, "y0", "y0", [scn.zeta], [scn.alpha])
    with pytest.raises(StackelbergError):
        evaluate_payoffs(prob, 1, 0)


# -- best responses ---------------------------------------------------------------------------------


def test_single_candidate():
    assert best_responses([0.7]) == [0]


def test_distinct_payoffs():
    assert best_responses([1.0, 2.0, 0.5]) == [1]


def test_ties_within_tolerance():
    assert best_responses([1.0, 1.0 + 5e-10, 0.0]) == [0, 1]
    assert best_responses([1.0, 1.0 + 5e-9, 0.0]) == [1]


# -- solution -------------------------------------------------------------------------------------------


def test_one_by_one():
    sol = solve_from_table([[3.0]], [[-1.0]])
    assert (sol.zeta_star, sol.alpha_star) == (0, 0)


def test_hand_built_two_by_two():
    # rows: follower choice, columns: leader choice
    SF = np.array([[1.0, 0.0], [0.0, 2.0]])
    SL = np.array([[3.0, 5.0], [4.0, 1.0]])
    # zeta=0 -> follower plays 0 (1 > 0) giving leader 3; zeta=1 -> follower plays 1 giving leader 1
    sol = solve_from_table(SF, SL)
    assert (sol.zeta_star, sol.alpha_star) == (0, 0) == enumerate_solution(SF, SL)[::-1]
    assert sol.leader_value == 3.0 and sol.satisfies_definition()


def test_anticoordination_beats_naive_leader_choice():
    SF = np.array([[0.0, 1.0], [1.0, 0.0]])
    SL = np.array([[10.0, 0.0], [-5.0, 2.0]])
    # the leader's naive best cell is (alpha=0, zeta=0) but the follower answers zeta=0 with alpha=1
    sol = solve_from_table(SF, SL)
    assert (sol.zeta_star, sol.alpha_star) == (1, 0)
    assert enumerate_solution(SF, SL) == (1, 0)


def test_optimistic_tie_breaking_favours_leader():
    SF = np.array([[1.0], [1.0]])
    SL = np.array([[0.0], [4.0]])
    sol = solve_from_table(SF, SL)
    assert sol.alpha_star == 1 and sol.table[0]["best_responses"] == [0, 1]


tables = st.integers(1, 5).flatmap(
    lambda nf: st.integers(1, 5).flatmap(
        lambda nl: st.tuples(
            arrays(float, (nf, nl), elements=st.integers(-3, 3).map(float)),
            arrays(float, (nf, nl), elements=st.integers(-3, 3).map(float)),
        )
    )
)


@given(tables)
def test_matches_enumeration(tab):
    SF, SL = tab
    sol = solve_from_table(SF, SL)
    assert (sol.zeta_star, sol.alpha_star) == enumerate_solution(SF, SL)
    assert sol.satisfies_definition()


@given(tables)
def test_leader_value_is_maximin_over_best_responses(tab):
    SF, SL = tab
    sol = solve_from_table(SF, SL)
    values = [max(SL[a, z] for a in best_responses(SF[:, z])) for z in range(SF.shape[1])]
    assert sol.leader_value == max(values)


def test_definition_check_detects_wrong_answers():
    SF = np.array([[1.0, 0.0], [0.0, 2.0]])
    SL = np.array([[3.0, 5.0], [4.0, 1.0]])
    sol = solve_from_table(SF, SL)
    sol.alpha_star = 1
    assert not sol.satisfies_definition()


# -- bundled fixtures and file format ------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["game_2x2", "game_anticoordination", "game_3x3"])
def test_fixture_solution_matches_enumeration(name):
    prob = problem_from_json(fixture(name))
    sol = solve_stackelberg(prob)
    assert enumerate_solution(sol.SF, sol.SL, sol.tie_tol) == (sol.zeta_star, sol.alpha_star)
    assert sol.satisfies_definition()


def test_anticoordination_fixture_is_not_naive():
    prob = problem_from_json(fixture("game_anticoordination"))
    SF, SL = payoff_table(prob)
    naive_zeta = np.unravel_index(np.argmax(SL), SL.shape)[1]
    sol = solve_from_table(SF, SL, prob.tie_tol)
    assert sol.zeta_star != naive_zeta


def test_threaded_table_equals_serial():
    obj = fixture("game_3x3")
    a = payoff_table(problem_from_json(obj), workers=1)
    b = payoff_table(problem_from_json(obj), workers=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_problem_round_trip():
    prob = problem_from_json(fixture("game_2x2"))
    again = problem_from_json(json.loads(sio.dumps(problem_to_json(prob))))
    assert np.array_equal(payoff_table(prob)[0], payoff_table(again)[0])


def test_incompatible_follower_candidate_is_located():
    obj = fixture("game_2x2")
    obj["follower_candidates"][1]["atoms"][0]["x0"] = [9.0]
    with pytest.raises(sio.ScenarioError) as err:
        problem_from_json(obj)
    assert err.value.pointer == "/follower_candidates/1" and "W_1 gap" in str(err.value)


def test_bad_payoff_source_is_located():
    obj = fixture("game_2x2")
    obj["sigma_L"] = "u0 + 1"
    with pytest.raises(sio.ScenarioError) as err:
        problem_from_json(obj)
    assert err.value.pointer == "/sigma_L"


def test_solution_json_and_csv_shapes():
    sol = solve_stackelberg(problem_from_json(fixture("game_2x2")))
    js = sol.to_json()
    assert {"zeta_star", "alpha_star", "leader_value", "follower_value", "table"} <= set(js)
    lines = sol.payoff_csv().splitlines()
    assert lines[0] == "alpha,zeta,sigma_F,sigma_L,best_response" and len(lines) == 5

