import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import bisect
from sddf.data import Dataset, Direction, ScaleInfo, direction_from_angle, normalize
from sddf.estimators import EstimatorSpec, LinearDdfModel, fit_cnls_d, fit_quadratic
from sddf.evaluation import (
    FoldError, MetricError, directional_mse, fold_indices, kfold_mse, line_crossings, radial_mse,
    squared_cost_error,
)


def cost_data(y, c):
    y = np.asarray(y, float)
    return Dataset(None, y.reshape(len(c), -1), cost=np.asarray(c, float))


def diagonal_model():
    """The frontier c = y as a single hyperplane e = (c - y) / sqrt 2."""
    s = 2 ** -0.5
    return LinearDdfModel(alpha=0.0, beta=np.array([s]), gamma=np.array([s]),
                          direction=direction_from_angle(math.pi / 4), residuals=np.zeros(1), mode="cost")


UNIT = ScaleInfo(np.zeros(2), np.ones(2), np.zeros(2, dtype=bool))


def test_directional_point_on_frontier():
    rep = directional_mse(diagonal_model(), cost_data([0.3], [0.3]), direction_from_angle(0.7))
    assert rep.value == pytest.approx(0.0, abs=1e-15)


def test_directional_vertical():
    rep = directional_mse(diagonal_model(), cost_data([1.0], [0.0]), direction_from_angle(math.pi / 2))
    assert rep.value == pytest.approx(1.0, abs=1e-12)


def test_directional_diagonal():
    rep = directional_mse(diagonal_model(), cost_data([1.0], [0.0]), direction_from_angle(math.pi / 4))
    assert rep.value == pytest.approx(0.5, abs=1e-12)


def test_radial_example():
    rep = radial_mse(diagonal_model(), cost_data([1.0], [0.0]), UNIT, model_space="normalized")
    assert rep.value == pytest.approx(0.5, abs=1e-12)
    rep0 = radial_mse(diagonal_model(), cost_data([0.4], [0.4]), UNIT, model_space="normalized")
    assert rep0.value == pytest.approx(0.0, abs=1e-15)


def fitted(n=30, seed=0, Q=1):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0, 1, (n, Q))
    c = (y ** 2).sum(axis=1) + rng.normal(0, 0.05, n)
    d = cost_data(y, c)
    nd = normalize(d)
    return d, nd, fit_cnls_d(nd.data, Direction.cost(np.full(Q, 0.5), 1.0))


def test_envelope_crossing_matches_bisection():
    d, nd, m = fitted()
    P = nd.data.columns()
    D = np.array([0.0, 1.0]) - P
    t_exact = line_crossings(m, P[:, 1:], P[:, :1], D[:, 1:], D[:, :1])
    t_bis = line_crossings(m, P[:, 1:], P[:, :1], D[:, 1:], D[:, :1], method="bisect")
    np.testing.assert_allclose(t_exact, t_bis, atol=1e-9)
    # independent scalar bisection for a few lines
    for i in range(5):
        def f(t, i=i):
            return m.ddf(P[i, 1:] + t * D[i, 1:], P[i, :1] + t * D[i, :1])[0]
        lo, hi = sorted([0.0, t_exact[i] * 2 if t_exact[i] != 0 else 1.0])
        assert bisect(f, lo, hi) == pytest.approx(t_exact[i], abs=1e-9)


def test_directional_pi_half_is_squared_cost_error():
    d, nd, m = fitted(Q=1)
    rng = np.random.default_rng(3)
    test = cost_data(rng.uniform(0.05, 0.95, 20), rng.uniform(0.05, 0.95, 20))
    rep = directional_mse(m, test, direction_from_angle(math.pi / 2))
    assert rep.value == pytest.approx(squared_cost_error(m, test), rel=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_every_unit_cube_point_has_one_crossing(seed):
    d, nd, m = fitted(25, seed=seed, Q=2)
    rng = np.random.default_rng(seed + 1)
    C = np.array([0.0, 0.0, 1.0])
    P = rng.uniform(0, 1, (80, 3))
    # points right next to C travel too little over t in [-10, 10] to reach the frontier
    P = P[np.linalg.norm(P - C, axis=1) >= 0.25][:40]
    test = cost_data(P[:, :2], P[:, 2])
    rep = radial_mse(m, test, UNIT.__class__(np.zeros(3), np.ones(3), np.zeros(3, bool)), model_space="normalized")
    assert rep.failures == 0
    # the envelope along each ray changes sign once: check on a fine grid
    D = C - P
    ts = np.linspace(-10, 10, 4001)
    for i in range(5):
        vals = m.ddf(P[i, 2:] + ts[:, None] * D[i, 2:], P[i, :2] + ts[:, None] * D[i, :2])
        s = np.sign(vals[np.abs(vals) > 1e-12])
        assert np.sum(s[1:] != s[:-1]) == 1


def test_radial_unit_invariance():
    rng = np.random.default_rng(4)
    y = rng.uniform(1, 5, (30, 2))
    c = (y ** 2).sum(axis=1) * rng.lognormal(0, 0.05, 30)
    d = cost_data(y, c)
    d2 = cost_data(7 * y, 1000 * c)
    for kind in ("cnls_d", "quadratic"):
        a = kfold_mse(d, 3, EstimatorSpec(kind), seed=1).value
        b = kfold_mse(d2, 3, EstimatorSpec(kind), seed=1).value
        assert b == pytest.approx(a, rel=1e-10, abs=1e-14)


def test_radial_original_vs_normalized_space():
    d, nd, m = fitted(30, seed=2, Q=2)
    model_orig = fit_cnls_d(d, Direction.cost(np.full(2, 0.5), 1.0).to_original_units(nd.scale_info))
    rng = np.random.default_rng(0)
    test = cost_data(rng.uniform(0, 1, (20, 2)), rng.uniform(0, 1.5, 20))
    a = radial_mse(m, test, nd.scale_info, model_space="normalized").value
    b = radial_mse(model_orig, test, nd.scale_info, model_space="original").value
    assert b == pytest.approx(a, rel=1e-5)


def test_kfold_noiseless_parametric_zero():
    y = np.linspace(1, 2, 12)
    d = cost_data(y, 3 * y + 1)
    rep = kfold_mse(d, 3, EstimatorSpec("parametric", direction=math.pi / 4))
    assert rep.value == pytest.approx(0.0, abs=1e-14)


def test_kfold_leave_one_out_zero():
    y = np.linspace(0, 1, 6)
    d = cost_data(y, 2 * y + 0.5)
    rep = kfold_mse(d, 6, EstimatorSpec("parametric", direction=math.pi / 3))
    assert rep.value == pytest.approx(0.0, abs=1e-14)
    assert len(rep.fold_values) == 6


def test_kfold_two_folds_by_hand():
    rng = np.random.default_rng(8)
    y = rng.uniform(0, 1, (20, 2))
    d = cost_data(y, (y ** 2).sum(axis=1) + rng.normal(0, 0.05, 20))
    rep = kfold_mse(d, 2, EstimatorSpec("quadratic"), seed=5)
    vals = []
    for test_idx in fold_indices(20, 2, 5):
        train_idx = np.setdiff1d(np.arange(20), test_idx)
        tr = normalize(d.subset(train_idx))
        model = fit_quadratic(tr.data)
        vals.append(radial_mse(model, d.subset(test_idx), tr.scale_info, model_space="normalized").value)
    assert rep.value == pytest.approx(np.mean(vals), rel=1e-14)


def test_fold_indices_partition():
    folds = fold_indices(23, 4, 0)
    allidx = np.sort(np.concatenate(folds))
    np.testing.assert_array_equal(allidx, np.arange(23))
    assert max(map(len, folds)) - min(map(len, folds)) <= 1


def test_failure_threshold():
    # frontier c = 5; vertical rays from c = 4.5 cross at t = -0.5, from c = -20 at t = -25 (outside)
    m = LinearDdfModel(alpha=-5.0, beta=np.array([1.0]), gamma=np.array([0.0]),
                       direction=direction_from_angle(math.pi / 2), residuals=np.zeros(1), mode="cost")
    g = direction_from_angle(math.pi / 2)
    c1 = np.r_[np.full(99, 4.5), -20.0]
    rep = directional_mse(m, cost_data(np.zeros(100), c1), g)
    assert rep.failures == 1 and rep.value == pytest.approx(0.25)
    c2 = np.r_[np.full(98, 4.5), -20.0, -30.0]
    with pytest.raises(MetricError):
        directional_mse(m, cost_data(np.zeros(100), c2), g)
    rep = directional_mse(m, cost_data(np.zeros(100), c2), g, strict=False)
    assert rep.failures == 2 and rep.value == pytest.approx(0.25)


def test_fold_error_carries_index():
    y = np.linspace(0, 1, 6)
    d = cost_data(y, np.ones(6) * 2.0)  # constant cost: degenerate normalization
    with pytest.raises(FoldError) as exc:
        kfold_mse(d, 2, EstimatorSpec("quadratic"))
    assert exc.value.fold == 0


def test_report_value_is_mean_of_successes():
    d, nd, m = fitted(20, seed=1)
    rep = radial_mse(m, d, nd.scale_info, model_space="normalized")
    assert rep.value == pytest.approx(np.nanmean(rep.sq_distances), rel=1e-15)
