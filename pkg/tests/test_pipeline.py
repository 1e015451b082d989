import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crsurv import pipeline as pl
from crsurv import survival as sv
from crsurv.data import CodingKind, CovariateSpec, Domain
from crsurv.errors import InconsistentPredictorSets
from crsurv.forest.rsf import ForestConfig
from crsurv.synth import SynthConfig, synth_cohort
from crsurv.tables import AnalysisTable


def _table(n=10, seed=0, specs=None, X=None, strata=("NHW-men",)):
    rng = np.random.default_rng(seed)
    specs = specs or [CovariateSpec("b", Domain.HEALTH, CodingKind.BINARY_PM1), CovariateSpec("z", Domain.HEALTH)]
    if X is None:
        X = np.column_stack((np.where(rng.random(n) < 0.5, 1.0, -1.0), rng.standard_normal(n)))
    entry = rng.uniform(50, 60, n)
    return AnalysisTable(
        ids=[f"s{i}" for i in range(n)],
        household=[f"h{i // 2}" for i in range(n)],
        stratum=[strata[i % len(strata)] for i in range(n)],
        entry=entry,
        exit=entry + rng.uniform(1, 10, n),
        event=rng.integers(0, 3, n),
        base_weight=np.ones(n),
        analysis_weight=rng.uniform(0.5, 2, n),
        X=X,
        specs=specs,
    )


# ---------------------------------------------------------------------------
# descriptives and correlations


def test_binary_half_positive_gives_proportion_half():
    X = np.column_stack(([1.0, -1.0] * 5, np.arange(10.0)))
    t = _table(X=X)
    t.analysis_weight = np.ones(10)
    rows = pl.describe(t)
    assert rows[0].estimate == 0.5 and rows[0].kind == "binary_pm1"


def test_describe_matches_hand_summed_oracle():
    t = _table(seed=3)
    rows = pl.describe(t)
    w = t.analysis_weight
    for j, row in enumerate(rows):
        x = t.X[:, j]
        if t.specs[j].is_binary:
            x = (x + 1) / 2
        W = sum(w)
        m = sum(wi * xi for wi, xi in zip(w, x)) / W
        totals = {}
        for h, wi, xi in zip(t.household, w, x):
            totals[h] = totals.get(h, 0.0) + wi * (xi - m) / W
        H = len(totals)
        se = math.sqrt(H / (H - 1) * sum(v * v for v in totals.values()))
        assert row.estimate == pytest.approx(m, abs=1e-12)
        assert row.se == pytest.approx(se, abs=1e-12)


def test_standardized_column_has_zero_mean():
    z = np.random.default_rng(0).standard_normal(50)
    z = (z - z.mean()) / z.std(ddof=1)
    t = _table(n=50, X=np.column_stack((np.ones(50), z)))
    t.analysis_weight = np.ones(50)
    assert abs(pl.describe(t)[1].estimate) < 1e-12


def test_correlation_examples():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(10_000)
    specs = [CovariateSpec(n) for n in ("x", "negx", "y", "c")]
    X = np.column_stack((x, -x, rng.standard_normal(10_000), np.ones(10_000)))
    R = pl.correlations(_table(n=10_000, specs=specs, X=X))
    assert R[0, 0] == 1.0 and R[0, 1] == pytest.approx(-1.0)
    assert abs(R[0, 2]) < 0.05
    np.testing.assert_array_equal(R, R.T)
    assert np.isnan(R[3]).all()


@given(st.integers(0, 10_000))
def test_correlation_matrix_is_symmetric_with_unit_diagonal(seed):
    t = _table(n=25, seed=seed)
    R = pl.correlations(t)
    assert np.all(np.diag(R) == 1.0)
    np.testing.assert_array_equal(R, R.T)
    assert np.all(np.abs(R) <= 1)


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_skips_sex_specific_in_male_strata_and_flags_zero_variance():
    specs = [CovariateSpec("menarche_pgs", Domain.GENETIC, sex_specific="women"), CovariateSpec("z"),
             CovariateSpec("const")]
    rng = np.random.default_rng(2)
    X = np.column_stack((rng.standard_normal(60), rng.standard_normal(60), np.ones(60)))
    t = _table(n=60, specs=specs, X=X, strata=("NHW-men", "NHW-women"))
    men = pl.run_sweep(t, "finegray", "NHW-men")
    assert [r.predictor for r in men] == ["z", "const"]
    assert men[1].status == "ZeroVariance" and men[1].formatted == "NA"
    women = pl.run_sweep(t, "finegray", "NHW-women")
    assert [r.predictor for r in women] == ["menarche_pgs", "z", "const"]


def test_death_free_sweep_gives_identical_models():
    cfg = SynthConfig(n=300, n_binary=2, n_continuous=2, death_hazard={"kind": "constant", "rate": 0.0},
                      beta_dementia=(0.5, 0, 0.3, 0), strata=("NHW-men",), seed=4)
    t = synth_cohort(cfg).table()
    fg = pl.run_sweep(t, "finegray")
    cs = pl.run_sweep(t, "causespecific")
    for a, b in zip(fg, cs):
        assert a.status == b.status == "ok"
        assert a.fit.hr == pytest.approx(b.fit.hr, abs=1e-8)


def test_empty_and_eventless_strata():
    t = _table(n=12)
    assert {r.status for r in pl.run_sweep(t, "causespecific", "NHB-women")} == {"EmptyCohort"}
    t.event[:] = 2
    assert {r.status for r in pl.run_sweep(t, "causespecific")} == {"NoEvents"}


# ---------------------------------------------------------------------------
# rank aggregation


def test_rank_aggregation_anchor():
    strata = ("NHW-men", "NHW-women", "NHB-men", "NHB-women")
    wealth = (2, 13, 10, 5)
    food = (20, 23, 11, 7)
    tables = {}
    for k, s in enumerate(strata):
        others = [r for r in range(1, 25) if r not in (wealth[k], food[k])]
        tables[s] = {"Lower Wealth": wealth[k], "Food Insecurity": food[k]}
        tables[s].update({f"p{i}": r for i, r in enumerate(others)})
    ranking = pl.rank_aggregate(tables)
    rows = {r.predictor: r for r in ranking.rows}
    assert rows["Lower Wealth"].mean_rank == 7.5
    assert rows["Food Insecurity"].mean_rank == 15.25
    assert rows["Lower Wealth"].overall < rows["Food Insecurity"].overall


def test_agreeing_strata_keep_their_order():
    order = ["c", "a", "d", "b"]
    tables = {s: {p: i + 1 for i, p in enumerate(order)} for s in "wxyz"}
    assert pl.rank_aggregate(tables).order() == order


def test_ties_broken_by_best_rank_then_name():
    tables = {"s1": {"a": 1, "b": 2, "c": 3}, "s2": {"a": 3, "b": 2, "c": 1}}
    # all means are 2; a and c share best rank 1 and are ordered by name
    assert pl.rank_aggregate(tables).order() == ["a", "c", "b"]


@given(st.permutations(list(range(4))), st.integers(0, 10_000))
def test_rank_aggregate_ignores_stratum_order(perm, seed):
    rng = np.random.default_rng(seed)
    names = [f"p{i}" for i in range(6)]
    tables = {f"s{k}": dict(zip(names, (rng.permutation(6) + 1).tolist())) for k in range(4)}
    shuffled = {f"s{k}": tables[f"s{k}"] for k in perm}
    assert pl.rank_aggregate(tables).order() == pl.rank_aggregate(shuffled).order()
    ranks = [r.overall for r in pl.rank_aggregate(tables).rows]
    assert ranks == list(range(1, 7))


def test_missing_predictors():
    tables = {"men": {"a": 1, "b": 2}, "women": {"a": 2, "b": 3, "menarche": 1}}
    with pytest.raises(InconsistentPredictorSets):
        pl.rank_aggregate(tables)
    worst = {r.predictor: r.mean_rank for r in pl.rank_aggregate(tables, exempt=["menarche"]).rows}
    assert worst["menarche"] == 2.0  # (3 + 1) / 2 with the worst rank 3 in men
    avail = {r.predictor: r.mean_rank for r in pl.rank_aggregate(tables, exempt=["menarche"], missing="available").rows}
    assert avail["menarche"] == 1.0


# ---------------------------------------------------------------------------
# orchestration and emission


def _small_cfg(**kw):
    return pl.PipelineConfig(forest=ForestConfig(n_trees=8, min_terminal_events=2), seed=5, **kw)


def _synth_table(n=400):
    cfg = SynthConfig(n=n, n_binary=2, n_continuous=2, beta_dementia=(0.7, 0, 0, 0), seed=9, household_max=3)
    return synth_cohort(cfg).table()


def test_every_subject_lands_in_one_stratum():
    t = _synth_table()
    reports, ranking = pl.run_all(t, _small_cfg())
    assert sum(r.n for r in reports) == t.n
    assert all(r.ok for r in reports)
    assert sorted(ranking.order()) == sorted(t.names)


def test_emit_is_byte_identical_across_runs_and_threads(tmp_path):
    t = _synth_table()
    outs = []
    for k, threads in enumerate((1, 2)):
        reports, ranking = pl.run_all(t, _small_cfg(threads=threads))
        d = tmp_path / str(k)
        pl.emit(reports, ranking, d, _small_cfg(threads=threads))
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]


def test_fits_csv_round_trips(tmp_path):
    t = _synth_table()
    cfg = _small_cfg(run_forest=False)
    reports, ranking = pl.run_all(t, cfg)
    pl.emit(reports, ranking, tmp_path, cfg)
    back = pl.read_fits(tmp_path / "fits_NHW-men.csv")
    assert back == reports[0].fits


def test_empty_stratum_writes_header_only(tmp_path):
    t = _synth_table(100)
    cfg = pl.PipelineConfig(strata=("NHW-men", "nobody"), run_forest=False)
    reports, ranking = pl.run_all(t, cfg)
    manifest = pl.emit(reports, ranking, tmp_path, cfg)
    assert (tmp_path / "fits_nobody.csv").read_text().strip() == ",".join(pl.FIT_COLUMNS)
    assert any("nobody" in w for w in manifest["warnings"])
    assert not reports[1].ok


def test_format_hr_cell():
    fit = sv.FitResult(beta=0.0, hr=1.5649, robust_se=0.1, ci95=(1.2899, 1.8851), n_clusters=1, loglik=0.0,
                       converged=True)
    assert pl.SweepRow("s", "p", "d", "finegray", "ok", fit).formatted == "1.56 (1.29, 1.89)"
