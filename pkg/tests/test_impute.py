import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crsurv.data import CodingKind, CovariateSpec
from crsurv.errors import AllMissingColumn, EmptyMatrix
from crsurv.impute import ImputeConfig, fill_initial, impute

FAST = ImputeConfig(iterations=2, trees_per_forest=20, seed=3)


def test_fill_initial_examples():
    np.testing.assert_array_equal(fill_initial([[1.0], [np.nan], [3.0]])[:, 0], [1, 2, 3])
    assert fill_initial(np.array([[1.0], [1.0], [-1.0], [np.nan]]))[3, 0] == 1.0
    assert fill_initial(np.array([[1.0], [-1.0], [np.nan]]))[2, 0] == 1.0
    assert fill_initial(np.array([[-1.0], [-1.0], [1.0], [np.nan]]))[3, 0] == -1.0


def test_errors():
    with pytest.raises(AllMissingColumn):
        fill_initial([[1.0, np.nan], [2.0, np.nan]])
    with pytest.raises(EmptyMatrix):
        impute(np.empty((0, 3)))
    with pytest.raises(AllMissingColumn):
        impute(np.array([[1.0, np.nan], [2.0, np.nan]]), cfg=FAST)


def test_complete_matrix_is_untouched():
    X = np.random.default_rng(0).standard_normal((30, 4))
    out = impute(X, cfg=FAST)
    np.testing.assert_array_equal(out.values, X)
    assert out.per_iteration_change == (0.0, 0.0)


def test_constant_column_imputes_the_constant():
    rng = np.random.default_rng(1)
    X = np.column_stack((np.full(20, 3.25), rng.standard_normal(20)))
    X[5, 0] = np.nan
    assert impute(X, cfg=FAST).values[5, 0] == 3.25


def _masked(seed, n=80, p=4, rate=0.15, binary=(0,)):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, p))
    Z[:, 1:] += Z[:, [0]]
    for j in binary:
        Z[:, j] = np.where(Z[:, j] > 0, 1.0, -1.0)
    X = Z.copy()
    X[rng.random((n, p)) < rate] = np.nan
    return Z, X


@given(st.integers(0, 10_000))
def test_observed_cells_preserved_and_binary_stays_binary(seed):
    _, X = _masked(seed, n=40)
    specs = [CovariateSpec("b", kind=CodingKind.BINARY_PM1)] + [CovariateSpec(f"z{j}") for j in range(3)]
    out = impute(X, specs, ImputeConfig(iterations=2, trees_per_forest=5, seed=seed))
    obs = ~np.isnan(X)
    assert np.array_equal(out.values[obs], X[obs])
    assert not np.isnan(out.values).any()
    assert set(np.unique(out.values[:, 0])) <= {-1.0, 1.0}
    np.testing.assert_array_equal(out.mask, ~obs)


def test_deterministic_and_thread_independent():
    _, X = _masked(5)
    a = impute(X, cfg=FAST)
    b = impute(X, cfg=ImputeConfig(iterations=2, trees_per_forest=20, seed=3, threads=3))
    np.testing.assert_array_equal(a.values, b.values)
    assert a.per_iteration_change == b.per_iteration_change
    c = impute(X, cfg=ImputeConfig(iterations=2, trees_per_forest=20, seed=4))
    assert not np.array_equal(a.values, c.values)


def test_visit_order_is_ascending_missingness():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((50, 3))
    X[:10, 0] = np.nan
    X[:2, 2] = np.nan
    out = impute(X, cfg=FAST)
    assert out.column_order == (1, 2, 0)
    assert list(out.column_change[0]) == [2, 0]


def test_change_metric_definition():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((40, 3))
    X[:6, 1] = np.nan
    cfg = ImputeConfig(iterations=1, trees_per_forest=10, seed=0)
    out = impute(X, cfg=cfg)
    mean = np.nanmean(X[:, 1])
    new = out.values[:6, 1]
    assert out.per_iteration_change[0] == pytest.approx(np.sum((new - mean) ** 2) / np.sum(new**2))


def test_beats_mean_imputation():
    Z, X = _masked(11, n=200, p=5, rate=0.1, binary=())
    out = impute(X, cfg=ImputeConfig(iterations=3, trees_per_forest=100, seed=1))
    m = np.isnan(X)
    mean_fill = fill_initial(X)
    err = np.sqrt(np.mean((out.values[m] - Z[m]) ** 2))
    base = np.sqrt(np.mean((mean_fill[m] - Z[m]) ** 2))
    assert err < base


def test_per_stratum_mode_imputes_groups_separately():
    rng = np.random.default_rng(4)
    X = np.vstack((rng.normal(0, 0.01, (20, 2)), rng.normal(10, 0.01, (20, 2))))
    X[3, 0] = X[25, 0] = np.nan
    groups = ["a"] * 20 + ["b"] * 20
    out = impute(X, cfg=ImputeConfig(iterations=1, trees_per_forest=20, per_stratum=True), groups=groups)
    assert abs(out.values[3, 0]) < 1 and abs(out.values[25, 0] - 10) < 1


def test_mtry_validation():
    assert ImputeConfig().resolved_mtry(10) == 3
    assert ImputeConfig().resolved_mtry(2) == 1
    with pytest.raises(ValueError):
        ImputeConfig(mtry=5).resolved_mtry(5)


def test_report_lists_missingness_and_changes():
    _, X = _masked(6)
    rep = impute(X, cfg=FAST).report(["b", "z1", "z2", "z3"])
    assert set(rep["missing_fraction"]) == {"b", "z1", "z2", "z3"}
    assert len(rep["per_iteration_change"]) == 2
