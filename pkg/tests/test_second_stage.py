import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from NestedCATE.basis        import BasisSpec, design_matrix
from NestedCATE.errors       import ConfigError, DataError, RankDeficiencyError
from NestedCATE.pseudo       import PseudoOutcomes
from NestedCATE.second_stage import (DEFAULT_SPEC, bootstrap_se, check_grid_support, evaluate_grid, fit_cate,
                                     make_grid, subgroup_cate)

LINEAR = BasisSpec(kind='polynomial', degree=1)


def _noisy(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, n)
    return x, 0.2 + 0.5 * x + rng.normal(0, 1 + x, n)


def test_exact_linear_fit():
    x = np.linspace(0, 1, 11)
    fit = fit_cate(1 + 2 * x, x, BasisSpec(kind='identity'))
    assert_allclose(fit.beta, [1.0, 2.0], atol=1e-12)
    assert_allclose(fit.residuals, 0.0, atol=1e-12)
    assert_allclose(fit.covariance, 0.0, atol=1e-20)
    assert fit.n_used == 11


def test_quadratic_reproduced_by_default_spline():
    x = np.linspace(0, 1, 50)
    fit = fit_cate(x**2 - x, x)
    assert fit.basis_spec.interior_knots == (np.median(x),)
    ge = evaluate_grid(fit, [0.0, 0.3, 0.77, 1.0])
    assert_allclose(ge.estimate, ge.grid**2 - ge.grid, atol=1e-10)


def test_ols_and_hc0_sandwich():
    x, y = _noisy()
    fit = fit_cate(y, x, LINEAR)
    M = np.column_stack([np.ones_like(x), x])
    beta, *_ = np.linalg.lstsq(M, y, rcond=None)
    assert_allclose(fit.beta, beta, rtol=1e-10)
    r = y - M @ beta
    bread = np.linalg.inv(M.T @ M)
    cov = bread @ (M.T * r**2) @ M @ bread
    assert_allclose(fit.covariance, cov, rtol=1e-8)


def test_integer_weights_equal_duplicated_rows():
    x, y = _noisy(n=60, seed=1)
    w = np.tile([0.0, 1.0, 2.0], 20)
    weighted = fit_cate(y, x, LINEAR, weights=w)
    idx = np.repeat(np.arange(60), w.astype(int))
    duplicated = fit_cate(y[idx], x[idx], LINEAR)
    assert_allclose(weighted.beta, duplicated.beta, rtol=1e-10)
    assert weighted.n_used == 40


def test_pseudo_outcome_object_accepted():
    x, y = _noisy(n=50)

    class Holder:
        values = y

    assert_array_equal(fit_cate(Holder(), x, LINEAR).beta, fit_cate(y, x, LINEAR).beta)


def test_constant_modifier_rank_deficient():
    with pytest.raises(RankDeficiencyError):
        fit_cate(np.arange(10.0), np.full(10, 0.3))
    with pytest.raises(RankDeficiencyError):
        fit_cate(np.arange(10.0), np.full(10, 0.3), LINEAR)


def test_fewer_observations_than_basis_columns():
    with pytest.raises(RankDeficiencyError):
        fit_cate([1.0, 2.0, 3.0], [0.1, 0.5, 0.9], BasisSpec(kind='polynomial', degree=3))


def test_length_mismatch():
    with pytest.raises(DataError):
        fit_cate([1.0, 2.0], [0.1, 0.2, 0.3], LINEAR)


def test_grid_standard_errors():
    x, y = _noisy()
    fit = fit_cate(y, x)
    grid = np.linspace(0.05, 0.95, 7)
    ge = evaluate_grid(fit, grid)
    Mg, _ = design_matrix(grid, fit.basis_spec)
    assert_allclose(ge.se, np.sqrt(np.diag(Mg @ fit.covariance @ Mg.T)), rtol=1e-10)
    assert_allclose(ge.estimate, fit.predict(grid))
    assert ge.get_ParaNames() == ['grid', 'estimate', 'se']


def test_grid_se_override():
    x, y = _noisy()
    fit = fit_cate(y, x, LINEAR)
    ge = evaluate_grid(fit, [0.2, 0.4], se=[1.0, 2.0])
    assert_array_equal(ge.se, [1.0, 2.0])


@pytest.mark.parametrize("grid", [[], [0.5, 0.5], [0.6, 0.4]])
def test_invalid_grid(grid):
    x, y = _noisy(n=50)
    with pytest.raises(ConfigError):
        evaluate_grid(fit_cate(y, x, LINEAR), grid)


def test_grid_outside_spline_boundary_clamped(capsys):
    x, y = _noisy(n=100)
    fit = fit_cate(y, x)
    ge = evaluate_grid(fit, [-0.5, x.min(), x.max(), 1.5])
    assert ge.estimate[0] == pytest.approx(ge.estimate[1])
    assert ge.estimate[3] == pytest.approx(ge.estimate[2])
    assert "2 grid points outside the basis boundary" in capsys.readouterr().out


def test_make_grid():
    assert_allclose(make_grid(0.0, 1.0, step=0.25), [0, 0.25, 0.5, 0.75, 1.0])
    assert_allclose(make_grid(0.0, 0.9, step=0.25), [0, 0.25, 0.5, 0.75])
    assert_allclose(make_grid(0.0, 1.0, points=3), [0, 0.5, 1.0])
    assert_array_equal(make_grid(0.4, 0.4, points=1), [0.4])
    with pytest.raises(ConfigError):
        make_grid(1.0, 0.0)
    with pytest.raises(ConfigError):
        make_grid(0.0, 1.0, step=-0.1)


def test_grid_support():
    x = np.linspace(0, 1, 101)
    assert check_grid_support(x, [0.0, 1.0]) == ['lower', 'upper']
    assert check_grid_support(x, [0.0, 1.0], minimum=5) == []
    assert check_grid_support(np.r_[x, np.full(30, 0.02)], [0.0, 1.0]) == ['upper']


def test_subgroup_means():
    table = subgroup_cate([1.0, 3.0, 2.0, 4.0, 6.0], [0, 0, 1, 1, 1])
    assert_array_equal(table.levels, [0, 1])
    assert_allclose(table.estimate, [2.0, 4.0])
    assert_allclose(table.se, [np.sqrt(2.0) / np.sqrt(2), 2.0 / np.sqrt(3)])
    assert_array_equal(table.n, [2, 3])
    assert table.get_ParaNames() == ['level', 'estimate', 'se', 'n']
    assert table.csvName == 'subgroup.csv'


def test_subgroup_means_equal_dummy_regression():
    rng = np.random.default_rng(6)
    x = rng.integers(0, 4, 300).astype(float)
    y = rng.normal(size=300) + x
    table = subgroup_cate(y, x)
    dummies = (x[:, None] == np.unique(x)[None, :]).astype(float)
    coef, *_ = np.linalg.lstsq(dummies, y, rcond=None)
    assert_allclose(table.estimate, coef, rtol=0, atol=1e-12)


def test_shifted_pseudo_outcomes_shift_estimates():
    x, y = _noisy(n=300, seed=7)
    pseudo = PseudoOutcomes(values=y, variant='aipw', provenance=None, rows=np.arange(300))
    grid = np.linspace(0.05, 0.95, 7)
    base = evaluate_grid(fit_cate(pseudo, x), grid)
    moved = evaluate_grid(fit_cate(pseudo.shifted(1.5), x), grid)
    assert_allclose(moved.estimate - base.estimate, 1.5, atol=1e-12)
    assert_allclose(moved.se, base.se, atol=1e-12)


def test_unit_weights_equal_unweighted_fit():
    x, y = _noisy(n=200, seed=8)
    plain = fit_cate(y, x)
    weighted = fit_cate(y, x, weights=np.ones(200))
    assert_array_equal(weighted.beta, plain.beta)
    assert_array_equal(weighted.covariance, plain.covariance)


def test_finer_grid_has_smaller_steps():
    x, y = _noisy(n=500, seed=9)
    fit = fit_cate(y, x)
    coarse = evaluate_grid(fit, np.linspace(0.1, 0.9, 11)).estimate
    fine = evaluate_grid(fit, np.linspace(0.1, 0.9, 101)).estimate
    assert np.max(np.abs(np.diff(fine))) < 0.3 * np.max(np.abs(np.diff(coarse)))


def test_subgroup_singleton_level():
    with pytest.raises(DataError, match="single observation"):
        subgroup_cate([1.0, 3.0, 2.0], [0, 0, 1])


def test_bootstrap_se_close_to_sandwich():
    x, y = _noisy(n=2000, seed=3)
    fit = fit_cate(y, x, LINEAR)
    grid = [0.2, 0.5, 0.8]
    boot = bootstrap_se(fit, grid, B=500, seed=5)
    assert_allclose(boot, evaluate_grid(fit, grid).se, rtol=0.15)
    assert_array_equal(boot, bootstrap_se(fit, grid, B=500, seed=5))


def test_grid_evaluation_written(tmp_path):
    x, y = _noisy(n=50)
    ge = evaluate_grid(fit_cate(y, x, LINEAR, stratum_label='mi=1'), [0.2, 0.4])
    ge.storePath = str(tmp_path)
    path = ge.writeCSV()
    assert path.endswith('grid_mi=1.csv')
    assert list(pd.read_csv(path).columns) == ['grid', 'estimate', 'se']


def test_default_spec():
    assert DEFAULT_SPEC.kind == 'bspline'
    assert DEFAULT_SPEC.order == 3
    assert DEFAULT_SPEC.n_knots == 1
