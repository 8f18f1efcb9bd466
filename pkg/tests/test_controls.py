import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfm.controls import (
    ControlDistribution,
    ControlError,
    ControlGrid,
    RelaxedControl,
    alpha_distance,
    control_metric,
    control_metric_matrix,
    default_control_net,
    dirac_control,
    integrate_control,
    validate_compatibility,
)
from mfm.measures import EmpiricalMeasure, net_integrals

U = ControlGrid([[-1.0], [0.0], [1.0]])


def random_control(rng, K=8, grid=U, T=1.0):
    return RelaxedControl(grid, rng.dirichlet(np.ones(grid.size), K), T)


def test_dirac_control_rows_are_one_hot():
    xi = dirac_control(U, 0, 4)
    assert xi.kernel.shape == (4, 3)
    assert np.array_equal(xi.kernel[:, 0], np.ones(4))
    assert np.allclose(xi.kernel.sum(1), 1.0)


def test_dirac_control_index_out_of_range():
    with pytest.raises(ControlError, match="out of range"):
        dirac_control(U, 3, 4)


def test_kernel_rows_must_be_probabilities():
    with pytest.raises(ControlError):
        RelaxedControl(U, [[0.5, 0.5, 0.5]])


@given(st.integers(1, 40), st.floats(0.1, 5.0))
def test_integral_of_one_is_t_end(K, T):
    xi = random_control(np.random.default_rng(K), K=K, T=T)
    assert integrate_control(lambda t, u: 1.0, xi, T) == pytest.approx(T, abs=1e-12)


def test_integral_of_u_under_dirac():
    xi = dirac_control(U, 2, 5, T=2.0)
    assert integrate_control(lambda t, u: u[0], xi, 1.3) == pytest.approx(1.3, abs=1e-12)


def test_integral_of_time_left_riemann():
    K, T = 64, 1.0
    xi = random_control(np.random.default_rng(0), K=K, T=T)
    got = integrate_control(lambda t, u: t, xi, T)
    # left Riemann undershoots by exactly half a slice
    assert abs(got - T**2 / 2) <= T * (T / K)
    assert got == pytest.approx(T**2 / 2 - T * T / (2 * K), abs=1e-12)


def test_partial_slice_is_prorated():
    xi = dirac_control(U, 2, 4)
    assert integrate_control(lambda t, u: 1.0, xi, 0.3) == pytest.approx(0.3, abs=1e-15)


def test_t_end_outside_horizon():
    with pytest.raises(ControlError):
        integrate_control(lambda t, u: 1.0, dirac_control(U, 0, 4), 1.5)


def test_refined_repeats_rows():
    xi = random_control(np.random.default_rng(1), K=4)
    R = xi.refined(12)
    assert R.shape == (12, 3) and np.array_equal(R[::3], xi.kernel)
    with pytest.raises(ControlError):
        xi.refined(10)


def test_mix_endpoints():
    rng = np.random.default_rng(2)
    a, b = random_control(rng), random_control(rng)
    assert np.allclose(a.mix(b, 0.0).kernel, a.kernel)
    assert np.allclose(a.mix(b, 1.0).kernel, b.kernel)


# -- compatibility ------------------------------------------------------------


def paired(m0, rng):
    return ControlDistribution.from_measure(m0, [random_control(rng) for _ in range(m0.size)])


def test_built_by_pairing_is_compatible():
    rng = np.random.default_rng(3)
    m0 = EmpiricalMeasure(rng.normal(size=(6, 2)), rng.dirichlet(np.ones(6)))
    rep = validate_compatibility(paired(m0, rng), m0)
    assert rep.passed and rep.gap == 0.0


def test_weight_perturbation_fails():
    rng = np.random.default_rng(4)
    m0 = EmpiricalMeasure([[0.0], [1.0], [3.0]], [0.3, 0.3, 0.4])
    alpha = paired(m0, rng)
    m0b = EmpiricalMeasure(m0.points, [0.4, 0.2, 0.4])
    assert not validate_compatibility(alpha, m0b).passed


@given(st.floats(1e-3, 2.0), st.integers(0, 3))
def test_shifted_atom_gap_is_weight_times_shift(h, k):
    pts = np.array([[0.0], [5.0], [10.0], [15.0]])
    w = np.array([0.1, 0.2, 0.3, 0.4])
    m0 = EmpiricalMeasure(pts, w)
    x0 = pts.copy()
    x0[k] += h
    alpha = ControlDistribution(x0, [dirac_control(U, 0, 2)] * 4, w)
    rep = validate_compatibility(alpha, m0)
    assert not rep.passed
    assert rep.gap == pytest.approx(w[k] * h, rel=1e-9)


def test_dimension_mismatch_raises():
    alpha = ControlDistribution([[0.0]], [dirac_control(U, 0, 2)], [1.0])
    with pytest.raises(ControlError, match="dimension"):
        validate_compatibility(alpha, EmpiricalMeasure.dirac([0.0, 0.0]))


# -- control metric and alpha distance -------------------------------------------------------


NET = default_control_net(U, 1.0, seed=0)


def test_control_metric_identity_and_symmetry():
    rng = np.random.default_rng(5)
    a, b = random_control(rng), random_control(rng)
    assert control_metric(a, a, NET) == 0.0
    assert control_metric(a, b, NET) == pytest.approx(control_metric(b, a, NET), abs=1e-15)


def test_control_metric_of_diracs_by_explicit_series():
    K, sub = 4, 8
    xi0, xi1 = dirac_control(U, 0, K), dirac_control(U, 2, K)
    # Young measures: midpoint atoms of width T/(K*sub) at the chosen grid index
    h = 1.0 / (K * sub)
    t = (np.arange(K * sub) + 0.5) * h
    total = 0.0
    for l, level in enumerate(NET.levels, start=1):
        best = 0.0
        for phi in level:
            i0 = h * phi(NET.domain, t, np.zeros(len(t), int)).sum()
            i1 = h * phi(NET.domain, t, np.full(len(t), 2)).sum()
            best = max(best, abs(i0 - i1))
        total += 2.0**-l * best
    assert control_metric(xi0, xi1, NET) == pytest.approx(total, abs=1e-13)


def test_metric_matrix_matches_pairwise():
    rng = np.random.default_rng(6)
    A = [random_control(rng) for _ in range(3)]
    B = [random_control(rng) for _ in range(2)]
    M = control_metric_matrix(A, B, NET)
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            assert M[i, j] == pytest.approx(control_metric(a, b, NET), abs=1e-14)


def test_grid_mismatch_rejected():
    V = ControlGrid([[0.0], [1.0]])
    with pytest.raises(ControlError):
        control_metric(dirac_control(V, 0, 2), dirac_control(V, 1, 2), NET)


def test_young_measure_has_mass_T():
    xi = random_control(np.random.default_rng(7), T=2.0)
    assert xi.as_measure().mass == pytest.approx(2.0)
    assert net_integrals(xi.as_measure(), default_control_net(U, 2.0))[0].shape == (8,)


def test_alpha_distance_to_itself():
    rng = np.random.default_rng(8)
    m0 = EmpiricalMeasure(rng.normal(size=(5, 1)), rng.dirichlet(np.ones(5)))
    alpha = paired(m0, rng)
    d, plan = alpha_distance(alpha, alpha, 2, NET)
    assert d == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(plan.dense(5, 5), np.diag(alpha.weights))


@given(st.floats(0.01, 3.0))
def test_alpha_distance_of_pure_shift(h):
    rng = np.random.default_rng(9)
    m0 = EmpiricalMeasure.uniform(rng.normal(size=(4, 2)))
    alpha = paired(m0, rng)
    shift = np.array([h, 0.0])
    d, _ = alpha_distance(alpha, alpha.shifted(shift), 1, NET)
    assert d == pytest.approx(h, abs=1e-9)


def test_alpha_distance_one_control_changed():
    rng = np.random.default_rng(10)
    x0 = np.array([[0.0], [100.0], [200.0]])
    w = np.array([0.2, 0.5, 0.3])
    ctrls = [random_control(rng) for _ in range(3)]
    other = random_control(rng)
    a = ControlDistribution(x0, ctrls, w)
    b = ControlDistribution(x0, [ctrls[0], other, ctrls[2]], w)
    d, _ = alpha_distance(a, b, 1, NET)
    assert d == pytest.approx(0.5 * control_metric(ctrls[1], other, NET), abs=1e-12)


def test_alpha_distance_triangle_on_samples():
    rng = np.random.default_rng(11)
    for _ in range(20):
        ms = [EmpiricalMeasure(rng.normal(size=(3, 1)), rng.dirichlet(np.ones(3))) for _ in range(3)]
        a, b, c = (paired(m, rng) for m in ms)
        ab, bc, ac = (alpha_distance(x, y, 1, NET)[0] for x, y in ((a, b), (b, c), (a, c)))
        assert ac <= ab + bc + 1e-9


def test_converging_sequence_distance_decreases_to_zero():
    rng = np.random.default_rng(12)
    m0 = EmpiricalMeasure(rng.normal(size=(6, 1)), rng.dirichlet(np.ones(6)))
    alpha = paired(m0, rng)
    target = [dirac_control(U, 1, 8)] * 6
    ds = []
    for k in range(10):
        eps = 2.0**-k
        ak = alpha.shifted(0.5 * eps).mixed(target, eps)
        ds.append(alpha_distance(ak, alpha, 2, NET)[0])
    assert all(b < a for a, b in zip(ds, ds[1:]))
    assert ds[-1] <= 2.0**-8 * ds[0]
