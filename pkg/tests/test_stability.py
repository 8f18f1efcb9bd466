import numpy as np
import pytest

from builders import U1, V1, make_scenario
from mfm.controls import ControlDistribution, dirac_control
from mfm.dynamics import SamplerConfig
from mfm.measures import TransportPlan, transport
from mfm.solver import delayed_euler_solve, motion_gap, picard_solve
from mfm.stability import (
    HypothesisViolation,
    Perturbation,
    StabilityError,
    check_growth_envelopes,
    envelope_constants,
    hat_a_matrix,
    hat_a_optimal_plan,
    key_estimate,
    key_estimate_terms,
    required_radius,
    stability_sweep,
)

X0 = ((-1.0,), (0.25,), (1.5,))
COUPLED = dict(
    f_I="-0.5*x0 + 0.5*u0 + 0.3*tanh(y0 - mean(0))", f_II="0.2*v0*cos(x0)", g="-0.5*y0 + 0.5*v0 + 0.2*sin(mean(0))",
    x0=X0, y0=(0.8,), u_idx=(0, 1, 2), v_idx=1, A=0.7, lip=(1e6, 0.5, 0.2, 0.5),
)
FAST = SamplerConfig(n_samples=64, n_pairs=32, t_nodes=9, U=U1.points, V=V1.points)


def solve(scn):
    return picard_solve(scn, tol=1e-10)


# -- forcing terms -------------------------------------------------------------------


def test_same_zeta_gives_zero_major_terms():
    scn = make_scenario(**COUPLED)
    m = solve(scn)
    rep = key_estimate_terms(m, m, scn, scn)
    assert np.all(rep.tilde_a == 0) and np.all(rep.bar_a == 0)


def test_same_alpha_gives_zero_hat_a():
    scn = make_scenario(**COUPLED)
    m = solve(scn)
    assert np.all(key_estimate_terms(m, m, scn, scn).hat_a_integral == 0)


def test_tilde_a_for_opposite_diracs_is_t():
    scn = make_scenario(g="v0", v_idx=1, K=4, N=64)
    scn2 = scn.with_(zeta=dirac_control(V1, 0, 4))
    m, m2 = solve(scn), solve(scn2)
    rep = key_estimate_terms(m, m2, scn, scn2)
    assert np.allclose(rep.tilde_a, m.time_grid, atol=1e-14)


def test_hat_a_matrix_pairs_match_full_table():
    scn = make_scenario(**COUPLED)
    m = solve(scn)
    rng = np.random.default_rng(0)
    other = ControlDistribution(
        scn.alpha.x0, [dirac_control(U1, rng.integers(0, 3, 4), 4) for _ in range(3)], scn.alpha.weights
    )
    full = hat_a_matrix(scn, m, other)
    i, j = np.array([0, 1, 2, 2]), np.array([1, 0, 2, 0])
    assert np.allclose(hat_a_matrix(scn, m, other, (i, j)), full[:, i, j])


def test_optimal_hat_a_plan_beats_other_plans():
    scn = make_scenario(**COUPLED)
    m = solve(scn)
    other = ControlDistribution(scn.alpha.x0, [dirac_control(U1, k, 4) for k in (2, 0, 1)], scn.alpha.weights)
    H = hat_a_matrix(scn, m, other)[-1]
    best = hat_a_optimal_plan(scn, m, other)
    opt = float(H[best.rows, best.cols] @ best.mass)
    n = len(scn.alpha.weights)
    rng = np.random.default_rng(1)
    for _ in range(50):
        P = rng.dirichlet(np.ones(n * n)).reshape(n, n)
        # Sinkhorn-project a random matrix onto the coupling polytope
        for _ in range(200):
            P *= (scn.alpha.weights / P.sum(1))[:, None]
            P *= (other.weights / P.sum(0))[None, :]
        assert opt <= float((H * P).sum()) + 1e-9
    assert opt == pytest.approx(transport(scn.alpha.weights, other.weights, H)[0], abs=1e-12)


def test_plan_with_wrong_marginals_rejected():
    scn = make_scenario(**COUPLED)
    m = solve(scn)
    bad = TransportPlan(np.array([0]), np.array([0]), np.array([1.0]), 0.0)
    with pytest.raises(StabilityError):
        key_estimate_terms(m, m, scn, scn, bad)


# -- key estimate ----------------------------------------------------------------------------


def test_constants_formula():
    C = envelope_constants(0.5, 2.0)
    K = np.exp(1.0)
    E = np.exp((0.5 * K + 0.5) * 2.0)
    assert C == pytest.approx({"C0": K * E, "C1": 2 * K * E, "C2": K * E, "C3": E, "C4": K * E})


def test_identical_scenarios():
    scn = make_scenario(**COUPLED)
    m = solve(scn)
    rep = key_estimate(m, m, scn, scn, sampler=FAST)
    assert rep.passed
    assert np.all(rep.lhs == 0) and np.all(rep.rhs == 0)


def test_y0_shift_on_contracting_decoupled_dynamics():
    h = 0.3
    scn = make_scenario(f_I="-x0 + u0", g="-y0 + v0", x0=X0, y0=(0.5,), u_idx=(0, 1, 2))
    scn2 = scn.with_(y0=np.array([0.5 + h]))
    rep = key_estimate(solve(scn), solve(scn2), scn, scn2, sampler=FAST)
    assert rep.passed
    assert rep.lhs[0] == pytest.approx(h, abs=1e-14)
    # decoupled: only the major gap moves, decaying like e^{-t} up to Euler error
    assert np.allclose(rep.lhs, h * np.exp(-rep.time_grid), rtol=0.02)


def test_radius_below_envelope_is_a_hypothesis_violation():
    scn = make_scenario(**COUPLED)
    m = solve(scn)
    with pytest.raises(HypothesisViolation) as err:
        key_estimate(m, m, scn, scn, c=0.5 * required_radius(scn), sampler=FAST)
    assert err.value.required == pytest.approx(required_radius(scn))


def test_dynamics_perturbation_enters_through_dist_c():
    scn = make_scenario(**COUPLED)
    pert = Perturbation(df_I=("0.25",))
    scn2 = pert.apply(scn, 1.0)
    rep = key_estimate(solve(scn), solve(scn2), scn, scn2, sampler=FAST)
    assert rep.passed
    assert rep.dist_f == pytest.approx(0.25, abs=1e-12) and rep.dist_g == 0.0


# -- growth envelopes --------------------------------------------------------------------------------


def test_zero_dynamics_within_envelope():
    scn = make_scenario(x0=X0, y0=(0.5,))
    for which in ("scheme", "limit"):
        assert check_growth_envelopes(delayed_euler_solve(scn, 16), scn, which).passed


def test_exponential_growth_within_envelope():
    scn = make_scenario(f_I="x0", x0=X0, A=1.0)
    assert check_growth_envelopes(delayed_euler_solve(scn, 64), scn).passed
    assert check_growth_envelopes(solve(scn), scn, "limit").passed


def test_understated_growth_constant_is_reported():
    # on T=2 the moment grows like e^2 while the A=0 envelope stays affine
    scn = make_scenario(f_I="x0", x0=X0, A=0.0, T=2.0)
    rep = check_growth_envelopes(delayed_euler_solve(scn, 64), scn)
    assert not rep.passed and rep.min_slack < 0
    assert rep.worst["value"] > rep.worst["envelope"]


def test_unknown_envelope_kind():
    scn = make_scenario()
    with pytest.raises(StabilityError):
        check_growth_envelopes(delayed_euler_solve(scn, 4), scn, "other")


# -- sweeps ---------------------------------------------------------------------------------------------


def test_zero_scale_gives_zero_gap():
    scn = make_scenario(**COUPLED)
    res = stability_sweep(scn, Perturbation(dy0=np.array([0.5])), [0.0, 1.0], sampler=FAST)
    assert res.D_zero_at_zero is True
    assert res.rows[0].D == 0.0


def test_y0_shift_is_linear_for_linear_dynamics():
    scn = make_scenario(f_I="-x0 + u0", g="-y0 + v0", x0=X0, y0=(0.5,), u_idx=(0, 1, 2))
    res = stability_sweep(scn, Perturbation(dy0=np.array([0.4])), [1.0, 0.5, 0.25, 0.125], sampler=FAST)
    D1 = res.rows[0].D
    for r in res.rows:
        assert r.D == pytest.approx(r.eps * D1, rel=1e-9)
    assert res.D_nonincreasing


def test_zeta_mixing_drives_gap_and_tilde_a_to_zero():
    scn = make_scenario(**{**COUPLED, "v_idx": 0})
    res = stability_sweep(scn, Perturbation(dzeta=dirac_control(V1, 1, 4)), [1.0, 0.5, 0.25, 0.125], sampler=FAST)
    D = [r.D for r in res.rows]
    ta = [r.report.tilde_a.max() for r in res.rows]
    assert res.D_nonincreasing
    assert D[-1] <= 0.25 * D[0] and ta[-1] <= 0.25 * ta[0]
    assert all(r.report.passed for r in res.rows)


def test_rows_keep_input_order_under_threads():
    scn = make_scenario(**COUPLED)
    pert = Perturbation(dy0=np.array([0.2]))
    serial = stability_sweep(scn, pert, [0.25, 1.0, 0.5], sampler=FAST, workers=1)
    threaded = stability_sweep(scn, pert, [0.25, 1.0, 0.5], sampler=FAST, workers=3)
    assert [r.eps for r in threaded.rows] == [0.25, 1.0, 0.5]
    assert serial.to_csv() == threaded.to_csv()


def test_sweep_csv_columns():
    scn = make_scenario(**COUPLED)
    res = stability_sweep(scn, Perturbation(dy0=np.array([0.2])), [1.0, 0.5], sampler=FAST)
    lines = res.to_csv().splitlines()
    assert lines[0] == "eps,D,dist_f,dist_g,tilde_a_sup,bar_a_sup,hat_a_int_sup,pass"
    assert len(lines) == 3


def test_perturbation_apply_at_zero_is_identity():
    scn = make_scenario(**COUPLED)
    pert = Perturbation(df_I=("sin(x0)",), dm0=np.array([0.3]), dy0=np.array([1.0]), dzeta=dirac_control(V1, 0, 4))
    m, m0 = solve(pert.apply(scn, 0.0)), solve(scn)
    assert motion_gap(m, m0)[0] <= 1e-12
    assert pert.channels == ["df_I", "dm0", "dy0", "dzeta"]
