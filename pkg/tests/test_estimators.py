import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_envelope, enumerate_active_sets, ols, weighted_local_linear
from sddf.afriat import AfriatProblem
from sddf.data import DataError, Dataset, Direction, direction_from_angle, output_direction_from_angle
from sddf.estimators import (
    EstimatorSpec, KernelModel, evaluate_ddf, fit_cnls_d, fit_cnls_d_isoquant, fit_cnls_d_multidir,
    fit_local_linear, fit_parametric_ddf, fit_quadratic, model_from_dict,
)
from sddf.multidir import detect_violations
from sddf.qp import OPTIMAL, solve_qp, verify_kkt


def cost_data(y, c):
    y = np.asarray(y, float)
    return Dataset(None, y.reshape(len(c), -1), cost=np.asarray(c, float))


def noisy_linear(n=40, seed=0, sd=0.1):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0, 1, n)
    c = y + rng.normal(0, sd, n)
    return cost_data(y, c)


def noisy_convex(n=40, Q=2, seed=0, sd=0.05):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0.1, 1, (n, Q))
    c = (y ** 2).sum(axis=1) + rng.normal(0, sd, n)
    return cost_data(y, c)


def kkt_max(model):
    return model.diagnostics["kkt"]["stationarity"], max(
        model.diagnostics["kkt"][k] for k in ("primal_eq", "primal_ineq", "dual_sign", "complementarity"))


# ------------------------------------------------------------ parametric

def test_parametric_cost_direction_is_ols():
    d = noisy_linear()
    m = fit_parametric_ddf(d, Direction.cost([0.0], 1.0))
    a0, a1 = ols(d.outputs, d.cost)
    # e = a + b c - g y with b = 1: c = -a + g y
    assert m.beta[0] == pytest.approx(1.0, abs=1e-10)
    assert m.gamma[0] == pytest.approx(a1, abs=1e-6)
    assert -m.alpha == pytest.approx(a0, abs=1e-6)


def test_parametric_output_direction_is_reverse_ols():
    d = noisy_linear()
    m = fit_parametric_ddf(d, Direction.cost([1.0], 0.0))
    a0, a1 = ols(d.cost, d.outputs[:, 0])
    # g = 1: y = a + b c
    assert m.gamma[0] == pytest.approx(1.0, abs=1e-10)
    assert m.beta[0] == pytest.approx(a1, abs=1e-6)
    assert m.alpha == pytest.approx(a0, abs=1e-6)


@pytest.mark.parametrize("theta", [0.0, math.pi / 8, math.pi / 4, math.pi / 2])
def test_parametric_noiseless_zero_residuals(theta):
    y = np.linspace(0, 1, 10)
    m = fit_parametric_ddf(cost_data(y, y), direction_from_angle(theta))
    assert np.max(np.abs(m.residuals)) < 1e-8


@pytest.mark.parametrize("theta", [0.3, 1.0])
def test_parametric_translation_normalization(theta):
    m = fit_parametric_ddf(noisy_linear(), direction_from_angle(theta))
    g = m.direction
    assert m.beta @ [g.g_c] + m.gamma @ g.g_y == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(m.residuals, m.alpha + m.beta[0] * noisy_linear().cost
                               - m.gamma[0] * noisy_linear().outputs[:, 0], atol=1e-10)


def test_parametric_needs_enough_points():
    with pytest.raises(DataError):
        fit_parametric_ddf(cost_data([0.0, 1.0], [0.0, 1.0]), direction_from_angle(0.5))


# ------------------------------------------------------------ CNLS-d

def test_cnls_collinear_points_zero_residuals():
    y = np.array([1.0, 2.0, 3.0])
    m = fit_cnls_d(cost_data(y, 2 * y), Direction.cost([1.0], 1.0))
    assert np.max(np.abs(m.residuals)) < 1e-6
    # marginal cost at the interior point from the active hyperplane
    k = m.active_piece([[2.0]])[0]
    assert m.gamma[k, 0] / m.beta[k, 0] == pytest.approx(2.0, abs=1e-5)


def test_cnls_three_points_matches_classical_oracle():
    y = np.array([0.0, 1.0, 2.0])
    c = np.array([1.0, 0.2, 1.5])
    m = fit_cnls_d(cost_data(y, c), Direction.cost([0.0], 1.0))
    # classical convex nondecreasing regression on fitted values phi
    s1, s2 = np.array([-1.0, 1.0, 0.0]), np.array([0.0, -1.0, 1.0])
    A = np.vstack([s1 - s2, -s1])  # slope1 <= slope2, slope1 >= 0
    f, phi = enumerate_active_sets(2 * np.eye(3), -2 * c, np.zeros((0, 3)), np.zeros(0), A, np.zeros(2))
    np.testing.assert_allclose(c - m.residuals, phi, atol=1e-6)


def test_coefficients_differ_across_directions():
    d = noisy_linear(30, seed=4)
    a = fit_cnls_d(d, direction_from_angle(math.pi / 8))
    b = fit_cnls_d(d, direction_from_angle(3 * math.pi / 8))
    diff = max(np.max(np.abs(a.alpha - b.alpha)), np.max(np.abs(a.beta - b.beta)),
               np.max(np.abs(a.gamma - b.gamma)))
    assert diff > 1e-4


def test_cnls_single_observation():
    m = fit_cnls_d(cost_data([1.0], [2.0]), Direction.cost([1.0], 1.0))
    assert abs(m.residuals[0]) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_cnls_invariants(seed):
    d = noisy_convex(40, seed=seed)
    g = Direction.cost([0.3, 0.4], 0.8)
    m = fit_cnls_d(d, g)
    # translation normalization and sign constraints
    np.testing.assert_allclose(m.beta @ [g.g_c] + m.gamma @ g.g_y, 1.0, atol=1e-8)
    assert m.beta.min() >= -1e-8 and m.gamma.min() >= -1e-8
    # Afriat inequalities over all pairs, not only the working set
    assert m.afriat_gap().max() <= 1e-6
    # own-point envelope value equals the residual
    np.testing.assert_allclose(evaluate_ddf(m, d.cost[:, None], d.outputs), m.residuals, atol=1e-6)
    # KKT
    stat, rest = kkt_max(m)
    assert stat <= 1e-6 and rest <= 1e-6
    assert m.diagnostics["objective_recovered"] == pytest.approx(m.objective, rel=1e-8)


def test_cnls_kkt_recomputed_independently():
    y = np.random.default_rng(1).uniform(0, 1, (10, 2))
    c = (y ** 2).sum(axis=1) + np.random.default_rng(2).normal(0, 0.05, 10)
    m = fit_cnls_d(cost_data(y, c), Direction.cost([0.5, 0.5], 1.0))
    prob = m._problem.qp(m._pairs)
    rep = verify_kkt(prob, m._solution, 1e-8)
    assert rep.max_residual <= 1e-6


def test_structured_solver_matches_generic():
    rng = np.random.default_rng(5)
    n = 12
    y = rng.uniform(0, 1, (n, 2))
    c = (y ** 2).sum(axis=1) + rng.normal(0, 0.05, n)
    Xs = (c[:, None] - c.mean()) / c.std()
    Ys = (y - y.mean(axis=0)) / y.std(axis=0)
    GX, GY = np.full((n, 1), 0.7), np.full((n, 2), 0.5)
    for kwargs in ({}, {"upper": (np.full(1, 3.0), np.full(2, 3.0))},
                   {"block_rows": (np.array([[-2.0, 1.0, 0.0], [-2.0, 0.0, 1.0]]), np.zeros(2))}):
        prob = AfriatProblem(Xs, Ys, GX, GY, **kwargs)
        pairs = prob.full_pairs()
        a = prob.solve(pairs)
        b = solve_qp(prob.qp(pairs))
        assert a.status == b.status == OPTIMAL
        assert prob.qp(pairs).objective(a.primal) == pytest.approx(b.objective, rel=1e-7, abs=1e-10)


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_direction_scaling_invariance(lam):
    d = noisy_convex(30, seed=7)
    g = Direction.cost([0.3, 0.4], 0.8)
    a = fit_cnls_d(d, g)
    b = fit_cnls_d(d, g.scaled(lam))
    for pa, pb in zip(a.fitted_points(), b.fitted_points()):
        np.testing.assert_allclose(pa, pb, atol=1e-6)
    np.testing.assert_allclose(b.residuals, a.residuals / lam, atol=1e-6)


def test_cnls_beats_parametric_objective():
    d = noisy_convex(40, seed=3)
    g = Direction.cost([0.3, 0.4], 0.8)
    assert fit_cnls_d(d, g).objective <= fit_parametric_ddf(d, g).objective + 1e-8


def test_slope_bound_coefficients():
    d = noisy_convex(30, seed=2)
    g = Direction.cost([1.0, 1.0], 1.0)
    m = fit_cnls_d(d, g, slope_bound=2.0)
    assert m.beta.max() <= 2.0 + 1e-6 and m.gamma.max() <= 2.0 + 1e-6
    with pytest.raises(DataError):
        fit_cnls_d(d, g, slope_bound=0.5)  # 0.5 * (3 / sqrt 3) < 1


def test_slope_bound_cost_slope():
    d = noisy_convex(30, seed=2)
    m = fit_cnls_d(d, Direction.cost([0.1, 0.1], 1.0), slope_bound=1.0, bound_kind="cost_slope")
    assert np.max(m.gamma / m.beta) <= 1.0 + 1e-5
    free = fit_cnls_d(d, Direction.cost([0.1, 0.1], 1.0))
    assert np.max(free.gamma / free.beta) > 1.0  # the cap binds on this data


def test_single_direction_has_no_shape_violations():
    rng = np.random.default_rng(0)
    th = rng.uniform(0, math.pi / 2, 40)
    Y = np.column_stack([np.cos(th), np.sin(th)]) + rng.normal(0, 0.05, (40, 2))
    m = fit_cnls_d_isoquant(Y, output_direction_from_angle(math.pi / 4))
    rep = detect_violations(m.fitted_points()[1])
    assert rep.monotonicity_violations == 0 and rep.concavity_violations == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-0.5, 0.5))
def test_translation_property(seed, delta):
    d = noisy_convex(15, seed=seed % 1000)
    g = Direction.cost([0.3, 0.4], 0.8)
    m = fit_cnls_d(d, g)
    x, y = d.cost[:, None], d.outputs
    shifted = evaluate_ddf(m, x - delta * g.g_c, y + delta * g.g_y)
    np.testing.assert_allclose(shifted, evaluate_ddf(m, x, y) - delta, atol=1e-9)


def test_evaluate_ddf_matches_brute_force():
    d = noisy_convex(25, seed=9)
    m = fit_cnls_d(d, Direction.cost([0.3, 0.4], 0.8))
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.uniform(0, 2, 1), rng.uniform(0, 1, 2)
        assert evaluate_ddf(m, x[None], y[None])[0] == pytest.approx(
            brute_envelope(m.alpha, m.beta, m.gamma, x, y), abs=1e-12)


def test_point_on_active_hyperplane_is_zero():
    d = noisy_convex(25, seed=9)
    m = fit_cnls_d(d, Direction.cost([0.3, 0.4], 0.8))
    xf, yf = m.fitted_points()
    np.testing.assert_allclose(evaluate_ddf(m, xf, yf), 0.0, atol=1e-6)


# ------------------------------------------------------------ isoquant / multidir

def test_isoquant_circle_points():
    th = np.array([0.2, 0.7, 1.3])
    Y = np.column_stack([np.cos(th), np.sin(th)])
    m = fit_cnls_d_isoquant(Y, output_direction_from_angle(math.pi / 4))
    assert np.max(np.abs(m.residuals)) < 1e-6
    _, Yhat = m.fitted_points()
    np.testing.assert_allclose(np.einsum("ij,ij->i", m.gamma, Yhat), m.alpha, atol=1e-6)


def test_multidir_shared_direction_reduces_to_isoquant():
    rng = np.random.default_rng(2)
    th = rng.uniform(0, math.pi / 2, 20)
    Y = np.column_stack([np.cos(th), np.sin(th)]) + rng.normal(0, 0.05, (20, 2))
    g = output_direction_from_angle(0.6)
    a = fit_cnls_d_isoquant(Y, g)
    b = fit_cnls_d_multidir(Y, (th > math.pi / 4).astype(int), [g, g])
    np.testing.assert_allclose(a.residuals, b.residuals, atol=1e-6)


def test_multidir_two_groups_solvable():
    rng = np.random.default_rng(3)
    th = rng.uniform(0, math.pi / 2, 30)
    Y = np.column_stack([np.cos(th), np.sin(th)]) + rng.normal(0, 0.05, (30, 2))
    groups = (th > math.pi / 4).astype(int)
    m = fit_cnls_d_multidir(Y, groups, [output_direction_from_angle(math.pi / 8),
                                        output_direction_from_angle(3 * math.pi / 8)])
    assert m.afriat_gap().max() <= 1e-6
    np.testing.assert_allclose(np.einsum("ij,ij->i", m.gamma, m.gy), 1.0, atol=1e-8)
    with pytest.raises(DataError):
        fit_cnls_d_multidir(Y, np.zeros(30, int), [output_direction_from_angle(0.1)] * 2)


# ------------------------------------------------------------ comparators

def test_quadratic_exact_recovery():
    y = np.linspace(0, 2, 15)
    m = fit_quadratic(cost_data(y, 1 + y + y ** 2))
    np.testing.assert_allclose(m.coefficients, [1, 1, 1], atol=1e-8)


def test_quadratic_linear_data():
    y = np.linspace(0, 2, 15)
    m = fit_quadratic(cost_data(y, 3 + 2 * y))
    assert abs(m.squared[0]) < 1e-8


def test_quadratic_normal_equations():
    d = noisy_convex(30, Q=3, seed=4)
    m = fit_quadratic(d)
    Y = d.outputs
    np.testing.assert_allclose(m.coefficients, ols(np.hstack([Y, Y ** 2]), d.cost), atol=1e-8)
    assert m.coefficients.size == 2 * 3 + 1


def test_local_linear_large_bandwidth_is_ols():
    d = noisy_convex(20, seed=1)
    km = KernelModel(np.array([1e6, 1e6]), d.outputs, d.cost)
    b = ols(d.outputs, d.cost)
    q = np.array([[0.3, 0.6]])
    assert km.cost(q)[0] == pytest.approx(b[0] + q[0] @ b[1:], abs=1e-6)


def test_local_linear_duplicates_give_mean():
    rng = np.random.default_rng(0)
    y = np.concatenate([np.full(50, 0.5), rng.uniform(0, 1, 10) + 5.0])
    c = np.concatenate([2.0 + rng.normal(0, 0.1, 50), rng.normal(0, 1, 10)])
    km = KernelModel(np.array([0.1]), y[:, None], c)
    assert km.cost([[0.5]])[0] == pytest.approx(c[:50].mean(), abs=1e-6)


def test_local_linear_matches_weighted_ls():
    d = noisy_convex(20, seed=6)
    h = np.array([0.3, 0.4])
    km = KernelModel(h, d.outputs, d.cost)
    Yq = np.random.default_rng(1).uniform(0.1, 1, (5, 2))
    expected = [weighted_local_linear(d.outputs, d.cost, h, q) for q in Yq]
    np.testing.assert_allclose(km.cost(Yq), expected, atol=1e-8)


def test_local_linear_fit_bandwidths_positive():
    m = fit_local_linear(noisy_convex(30, seed=2))
    assert np.all(m.bandwidths > 0) and np.isfinite(m.cv_score)


# ------------------------------------------------------------ spec / serialization

@pytest.mark.parametrize("kind", ["cnls_d", "parametric", "quadratic", "local_linear"])
def test_model_roundtrip(kind):
    d = noisy_convex(25, seed=1)
    m = EstimatorSpec(kind, direction=[0.3, 0.4, 0.8]).fit(d)
    m2 = model_from_dict(m.to_dict())
    q = np.random.default_rng(0).uniform(0.2, 0.9, (5, 2))
    np.testing.assert_allclose(m2.cost(q), m.cost(q), rtol=1e-12)


def test_estimator_spec_validation():
    with pytest.raises(DataError):
        EstimatorSpec("nope")
    with pytest.raises(DataError):
        EstimatorSpec(slope_bound=-1.0)
    with pytest.raises(DataError):
        EstimatorSpec(direction=0.5).resolve_direction(noisy_convex(10))
