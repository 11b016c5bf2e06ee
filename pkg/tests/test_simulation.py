import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sddf.data import DataError, Direction, NoiseModel
from sddf.estimators import fit_cnls_d_isoquant
from sddf.evaluation import isoquant_radial_mse
from sddf.simulation import (
    AngleDist, Cell, DgpSpec, ExperimentGrid, TableLayout, build_profile, direction_grid_3d, gen_isoquant_2d,
    gen_isoquant_3d, gen_linear, noise_sd_base, replication_rng, run_grid, run_replication,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_linear_lambda_zero_on_truth():
    tr, te = gen_linear(DgpSpec("linear_2d", n=50, lam=0.0), rng())
    np.testing.assert_array_equal(tr.cost, tr.outputs[:, 0])
    np.testing.assert_array_equal(te.cost, te.outputs[:, 0])
    assert np.all((tr.outputs >= 0) & (tr.outputs <= 1))


def test_linear_fixed_zero_angle_leaves_cost():
    spec = DgpSpec("linear_2d", n=50, lam=0.5, noise=NoiseModel("fixed", 0.5, angle=0.0))
    tr, _, truth = gen_linear(spec, rng(), return_truth=True)
    np.testing.assert_allclose(tr.cost, truth.cost, atol=1e-15)
    assert np.abs(tr.outputs - truth.outputs).max() > 0


def test_noise_sd_base_two_pass_oracle():
    y = rng(1).uniform(0, 1, 200)
    m = sum(y) / len(y)
    sd = math.sqrt(sum((v - m) ** 2 for v in y) / (len(y) - 1))
    assert noise_sd_base(y, y.copy()) == pytest.approx(sd, rel=1e-12)


def test_linear_noise_length_scale():
    # fixed direction (1, 0): the output shift is the noise length, N(0, lam * eps0)
    n, lam = 10_000, 0.3
    spec = DgpSpec("linear_2d", n=n, lam=lam, noise=NoiseModel("fixed", lam, angle=0.0))
    tr, _, truth = gen_linear(spec, rng(2), return_truth=True)
    shift = tr.outputs[:, 0] - truth.outputs[:, 0]
    scale = lam * noise_sd_base(truth.outputs[:, 0], truth.cost)
    assert abs(shift.mean()) < 3 * scale / math.sqrt(n)
    assert abs(shift.std(ddof=1) - scale) < 3 * scale / math.sqrt(2 * n)


def test_linear_random_noise_unit_directions():
    spec = DgpSpec("linear_2d", n=500, lam=0.2)
    tr, _, truth = gen_linear(spec, rng(3), return_truth=True)
    e = np.c_[tr.outputs[:, 0] - truth.outputs[:, 0], tr.cost - truth.cost]
    # all quadrants occur: directions are not sign-restricted
    quads = {(a > 0, b > 0) for a, b in e}
    assert len(quads) == 4


def test_linear_test_set_kinds():
    spec = DgpSpec("linear_2d", n=20, lam=0.2)
    _, te = gen_linear(spec, rng(), test="truth")
    np.testing.assert_array_equal(te.cost, te.outputs[:, 0])
    _, te = gen_linear(spec, rng(), test="noisy")
    assert np.abs(te.cost - te.outputs[:, 0]).max() > 0
    with pytest.raises(DataError):
        gen_linear(spec, rng(), test="other")


def test_isoquant_lambda_zero_on_circle():
    tr, te = gen_isoquant_2d(DgpSpec(n=100, lam=0.0), rng())
    np.testing.assert_allclose(np.linalg.norm(tr, axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(te, axis=1), 1.0, atol=1e-15)


def test_isoquant_fixed_zero_angle_second_output_unperturbed():
    spec = DgpSpec(n=100, lam=0.1, noise=NoiseModel("fixed", 0.1, angle=0.0))
    tr, _, truth = gen_isoquant_2d(spec, rng(), return_truth=True)
    np.testing.assert_array_equal(tr[:, 1], truth[:, 1])


def test_isoquant_noise_lengths():
    n, lam = 10_000, 0.1
    spec = DgpSpec(n=n, lam=lam, noise=NoiseModel("fixed", lam, angle=0.0))
    tr, _, truth = gen_isoquant_2d(spec, rng(4), return_truth=True)
    length = tr[:, 0] - truth[:, 0]
    assert abs(length.mean()) < 3 * lam / math.sqrt(n)
    assert abs(length.std(ddof=1) - lam) < 3 * lam / math.sqrt(2 * n)


def test_isoquant_random_noise_half_plane():
    spec = DgpSpec(n=2000, lam=0.1)
    tr, _, truth = gen_isoquant_2d(spec, rng(5), return_truth=True)
    e = tr - truth
    # e = l (cos t, sin t) with t in [-pi/2, pi/2]; l has either sign so no quadrant is excluded
    assert np.all(np.isfinite(e))
    assert abs(np.mean(e[:, 1])) < 3 * 0.1 / math.sqrt(2000)


def test_truncated_normal_mean():
    dist = AngleDist("normal", math.pi / 4, math.pi / 16)
    th = dist.sample(rng(6), 10_000)
    assert th.min() >= 0 and th.max() <= math.pi / 2
    se = th.std(ddof=1) / math.sqrt(th.size)
    assert abs(th.mean() - math.pi / 4) < 3 * se


def test_truncated_gamma_in_range():
    for a, b in [(3.0, math.pi / 2), (0.5, math.pi / 24)]:
        th = AngleDist("gamma", a, b).sample(rng(7), 5000)
        assert th.min() >= 0 and th.max() <= math.pi / 2


def test_angle_dist_validation():
    with pytest.raises(DataError):
        AngleDist("cauchy")
    with pytest.raises(DataError):
        AngleDist("uniform", 1.0, 0.5)
    with pytest.raises(DataError):
        AngleDist("gamma", -1.0, 1.0)
    with pytest.raises(DataError):
        AngleDist("normal", 100.0, 0.01).sample(rng(), 5)


def test_dgp_validation():
    with pytest.raises(DataError):
        DgpSpec("cubic")
    with pytest.raises(DataError):
        DgpSpec(n=1)
    with pytest.raises(DataError):
        DgpSpec(lam=-0.1)


def test_direction_grid_3d():
    g = direction_grid_3d()
    assert g.shape == (19, 3)
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0)
    assert len({tuple(np.round(v, 9)) for v in g}) == 19
    assert np.any(np.all(np.abs(g - 3 ** -0.5) < 1e-12, axis=1))
    assert np.any(np.all(np.abs(np.round(g, 2) - 0.58) < 1e-12, axis=1))


def test_isoquant_3d_lambda_zero_on_sphere():
    tr, te = gen_isoquant_3d(DgpSpec("isoquant_3d", n=100, lam=0.0), rng())
    np.testing.assert_allclose(np.linalg.norm(tr, axis=1), 1.0, atol=1e-15)
    assert np.all(tr >= 0) and np.all(te >= 0)


def test_isoquant_3d_noise_unit_directions():
    spec = DgpSpec("isoquant_3d", n=200, lam=0.1, noise=NoiseModel("random", 0.1))
    tr, _, truth = gen_isoquant_3d(spec, rng(8), return_truth=True)
    e = tr - truth
    assert e.shape == (200, 3) and np.all(np.isfinite(e))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_replication_rng_deterministic(master, key, r):
    a = replication_rng(master, key, r).random(4)
    b = replication_rng(master, key, r).random(4)
    np.testing.assert_array_equal(a, b)


def test_cell_key_depends_on_parameters():
    a, b = DgpSpec(lam=0.1), DgpSpec(lam=0.2)
    assert a.cell_key() != b.cell_key()
    assert DgpSpec(lam=0.1).cell_key() == a.cell_key()


def small_grid(R=2, cells=None, seed=0):
    cells = cells or [
        Cell(DgpSpec(n=15, lam=0.1), "isoquant", {"directions": [[1.0, 1.0]]}, "a"),
        Cell(DgpSpec(n=15, lam=0.2), "isoquant", {"directions": [[1.0, 1.0]]}, "b"),
    ]
    rows = [(i, "mse", 0, c.label) for i, c in enumerate(cells)]
    return ExperimentGrid("t", cells, [TableLayout("t", "t", [""], ["pi/4"], rows)], R, seed)


def test_single_replication_equals_direct_pipeline():
    grid = small_grid(R=1)
    rep = run_grid(grid)
    dgp = grid.cells[0].dgp
    train, test = gen_isoquant_2d(dgp, replication_rng(0, dgp.cell_key(), 0))
    m = fit_cnls_d_isoquant(train, Direction.outputs([1.0, 1.0]))
    assert rep.table_values("t")[0, 0] == isoquant_radial_mse(m, test).value


def test_cell_permutation_invariance():
    g = small_grid()
    rev = small_grid(cells=list(g.cells)[::-1])
    a, b = run_grid(g), run_grid(rev)
    np.testing.assert_array_equal(a.table_values("t"), b.table_values("t")[::-1])


def test_grid_deterministic():
    a, b = run_grid(small_grid()), run_grid(small_grid())
    assert a.to_dict() == b.to_dict()


def test_adding_replications_keeps_earlier_draws():
    g3, g4 = small_grid(R=3), small_grid(R=4)
    for r in range(3):
        a = run_replication(g3, 0, r)["mse"]
        b = run_replication(g4, 0, r)["mse"]
        np.testing.assert_array_equal(a, b)


def test_thread_count_does_not_change_report():
    a, b = run_grid(small_grid()), run_grid(small_grid(), threads=2)
    np.testing.assert_array_equal(a.table_values("t"), b.table_values("t"))


def test_failed_cell_recorded():
    # a normal centred far outside [0, pi/2] never yields an angle, so every replication fails
    bad = Cell(DgpSpec(n=10, lam=0.1, angle_dist=AngleDist("normal", 50.0, 0.01)), "isoquant",
               {"directions": [[1.0, 1.0]]}, "bad")
    rep = run_grid(small_grid(R=2, cells=[bad]))
    assert rep.failed_cells == [0] and rep.failures == [2]
    assert "first_errors" in rep.meta


@pytest.mark.parametrize("name, shape", [("exp1", (1, 5)), ("exp2", (5, 5)), ("exp4", (3, 5)), ("exp5", (3, 5))])
def test_profile_table_shapes(name, shape):
    grid = build_profile(name, replications=1, n=12)
    rows = grid.tables[0].rows
    assert (len(rows), len(grid.tables[0].columns)) == shape


def test_exp6_profile_has_19_rows():
    grid = build_profile("exp6", replications=1, n=12)
    assert len(grid.tables[0].rows) == 19


def test_unknown_profile():
    with pytest.raises(DataError):
        build_profile("exp9")
