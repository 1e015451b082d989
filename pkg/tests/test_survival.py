import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from crsurv import survival as sv
from crsurv.data import Event, Subject
from crsurv.errors import EmptyCohort, NoEvents, NonIdentifiable, ZeroVariance

from conftest import random_cohort


def _idx(entry, exit_, event, weight=None, cluster=None):
    return sv.RiskSetIndex.from_arrays(entry, exit_, event, weight, cluster)


# ---------------------------------------------------------------------------
# brute-force oracles (independent loops over subjects)


def km_oracle(entry, exit_, event, weight, kinds):
    ages = sorted({t for t, e, w in zip(exit_, event, weight) if e in kinds and w > 0})
    s, out = 1.0, []
    for t in ages:
        y = sum(w for a, b, w in zip(entry, exit_, weight) if a < t <= b)
        d = sum(w for b, e, w in zip(exit_, event, weight) if b == t and e in kinds)
        s *= 1.0 - d / y
        out.append(s)
    return np.array(ages), np.array(out)


def pl_oracle(entry, exit_, event, weight, x, beta, cause=1):
    ll = 0.0
    for i in range(len(x)):
        if event[i] != cause or weight[i] <= 0:
            continue
        t = exit_[i]
        den = sum(weight[j] * math.exp(beta * x[j]) for j in range(len(x)) if entry[j] < t <= exit_[j])
        ll += weight[i] * (beta * x[i] - math.log(den))
    return ll


def fg_weight_oracle(entry, exit_, event, weight, t, G):
    """Subdistribution at-risk weight of every subject at age ``t``."""
    out = []
    for a, b, e in zip(entry, exit_, event):
        if a < t <= b:
            out.append(1.0)
        elif e == 2 and b < t:
            out.append(G.left(t) / G.left(b))
        else:
            out.append(0.0)
    return np.array(out)


# ---------------------------------------------------------------------------
# risk sets


def test_risk_set_membership_is_half_open():
    idx = _idx([50.0, 55.0], [60.0, 70.0], [1, 0])
    assert idx.at_risk(55.0).tolist() == [True, False]
    assert idx.at_risk(60.0).tolist() == [True, True]
    assert idx.at_risk(60.0001).tolist() == [False, True]
    assert idx.n_at_risk(60.0) == 2
    assert idx.n_at_risk(50.0) == 0


def test_tied_exit_ages_share_one_event_age():
    idx = _idx([50.0, 51.0, 52.0], [60.0, 60.0, 65.0], [1, 1, 0])
    assert idx.event_ages.tolist() == [60.0]
    assert idx.events_at(60.0) == 2


def test_empty_cohort():
    with pytest.raises(EmptyCohort):
        sv.build_risk_sets([])


@given(st.integers(0, 10_000))
def test_n_at_risk_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    entry, exit_, event, w = random_cohort(rng, 25, ties=seed % 2 == 0)
    idx = _idx(entry, exit_, event, w)
    for t in np.concatenate((exit_, entry, rng.uniform(45, 90, 5))):
        assert idx.n_at_risk(t) == pytest.approx(w[(entry < t) & (t <= exit_)].sum(), abs=1e-9)


# ---------------------------------------------------------------------------
# product-limit curves


@pytest.mark.parametrize("target,kinds", [("all", {1, 2}), ("dementia", {1}), ("censoring", {0})])
def test_kaplan_meier_matches_oracle(rng, target, kinds):
    for _ in range(10):
        entry, exit_, event, w = random_cohort(rng, 30, ties=True)
        curve = sv.kaplan_meier(_idx(entry, exit_, event, w), target)
        ages, surv = km_oracle(entry, exit_, event, w, kinds)
        np.testing.assert_allclose(curve.ages, ages)
        np.testing.assert_allclose(curve.survival, surv, rtol=1e-12, atol=1e-14)


def test_km_without_censoring_is_empirical_survival():
    exit_ = np.array([1.0, 2.0, 3.0, 4.0])
    curve = sv.kaplan_meier(_idx(np.zeros(4), exit_, np.ones(4, int)))
    np.testing.assert_allclose(curve.survival, [0.75, 0.5, 0.25, 0.0])
    assert curve(0.5) == 1.0 and curve(2.0) == 0.5 and curve.left(2.0) == 0.75


def test_aalen_johansen_without_deaths_is_one_minus_km(rng):
    entry, exit_, event, w = random_cohort(rng, 40, p_death=0.0)
    idx = _idx(entry, exit_, event, w)
    aj = sv.aalen_johansen(idx)
    km = sv.kaplan_meier(idx, "dementia")
    np.testing.assert_allclose(aj.cif[Event.DEMENTIA], 1 - km.survival, atol=1e-13)
    assert np.all(aj.cif[Event.DEATH] == 0)


@given(st.integers(0, 10_000))
def test_cif_conservation_and_monotonicity(seed):
    rng = np.random.default_rng(seed)
    entry, exit_, event, w = random_cohort(rng, int(rng.integers(2, 60)), ties=seed % 3 == 0)
    aj = sv.aalen_johansen(_idx(entry, exit_, event, w))
    total = aj.cif[Event.DEMENTIA] + aj.cif[Event.DEATH] + aj.survival
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    for c in (Event.DEMENTIA, Event.DEATH):
        assert np.all(np.diff(aj.cif[c]) >= -1e-15)
        assert np.all((aj.cif[c] >= 0) & (aj.cif[c] <= 1 + 1e-12))


def test_weights_act_as_replication(rng):
    entry, exit_, event, _ = random_cohort(rng, 20)
    w = rng.integers(1, 4, 20)
    rep = np.repeat(np.arange(20), w)
    a = sv.aalen_johansen(_idx(entry, exit_, event, w.astype(float)))
    b = sv.aalen_johansen(_idx(entry[rep], exit_[rep], event[rep]))
    np.testing.assert_allclose(a.cif[Event.DEMENTIA], b.cif[Event.DEMENTIA], atol=1e-13)


# ---------------------------------------------------------------------------
# Cox model


def _identifiable_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 11))
    entry, exit_, event, w = random_cohort(rng, n, p_dem=0.5, p_death=0.1)
    x = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    return entry, exit_, event, w, x


def grid_polish_argmax(f, lo=-10.0, hi=10.0, step=1e-2):
    grid = np.arange(lo, hi + step / 2, step)
    vals = np.array([f(b) for b in grid])
    k = int(np.argmax(vals))
    if np.ptp(vals) < 1e-9 or k in (0, grid.size - 1):
        return None  # no interior maximum: likelihood is monotone
    res = minimize_scalar(lambda b: -f(b), bounds=(grid[k - 1], grid[k + 1]), method="bounded",
                          options={"xatol": 1e-12})
    return res.x


def test_cox_matches_grid_oracle_on_tiny_instances():
    checked = 0
    for seed in range(200):
        entry, exit_, event, w, x = _identifiable_instance(seed)
        if not (event == 1).any() or len(set(x)) < 2:
            continue
        best = grid_polish_argmax(lambda b: pl_oracle(entry, exit_, event, w, x, b))
        if best is None:
            continue
        fit = sv.cox_fit(_idx(entry, exit_, event, w), x)
        assert fit.beta == pytest.approx(best, abs=1e-5)
        checked += 1
        if checked == 15:
            break
    assert checked == 15


def test_partial_loglik_matches_oracle(rng):
    for _ in range(10):
        entry, exit_, event, w = random_cohort(rng, 15, ties=True)
        x = rng.standard_normal(15)
        for beta in (-0.7, 0.0, 1.3):
            ll, _ = sv.partial_loglik(_idx(entry, exit_, event, w), x, beta)
            assert ll == pytest.approx(pl_oracle(entry, exit_, event, w, x, beta), rel=1e-11, abs=1e-11)


def test_score_is_gradient_of_loglik(rng):
    for sub in (False, True):
        entry, exit_, event, w = random_cohort(rng, 40)
        x = rng.standard_normal(40)
        idx = _idx(entry, exit_, event, w)
        for beta in (-0.5, 0.2, 0.9):
            _, U = sv.partial_loglik(idx, x, beta, subdistribution=sub)
            h = 1e-5
            fd = (sv.partial_loglik(idx, x, beta + h, subdistribution=sub)[0]
                  - sv.partial_loglik(idx, x, beta - h, subdistribution=sub)[0]) / (2 * h)
            assert U[0] == pytest.approx(fd, rel=1e-6)


def test_score_residuals_sum_to_score(rng):
    entry, exit_, event, w = random_cohort(rng, 60)
    x = rng.standard_normal((60, 2))
    for fitter in (sv.cox_fit, sv.fine_gray_fit):
        _, fit = fitter(_idx(entry, exit_, event, w), x, return_internals=True)
        total = (fit.weight[:, None] * fit.residuals).sum(axis=0)
        np.testing.assert_allclose(total, fit.score, atol=1e-9)
        assert np.max(np.abs(fit.score)) < 1e-6


def test_loglik_path_is_monotone(rng):
    entry, exit_, event, w = random_cohort(rng, 80)
    x = rng.standard_normal(80)
    _, fit = sv.cox_fit(_idx(entry, exit_, event, w), x, return_internals=True)
    assert np.all(np.diff(fit.loglik_path) >= -1e-12)
    assert fit.converged and fit.iterations <= sv.MAX_NEWTON


def test_integer_weights_equal_replication(rng):
    entry, exit_, event, _ = random_cohort(rng, 40)
    x = rng.standard_normal(40)
    w = rng.integers(1, 4, 40)
    rep = np.repeat(np.arange(40), w)
    for fitter in (sv.cox_fit, sv.fine_gray_fit):
        a = fitter(_idx(entry, exit_, event, w.astype(float)), x)
        b = fitter(_idx(entry[rep], exit_[rep], event[rep]), x[rep])
        assert a.beta == pytest.approx(b.beta, abs=1e-9)


def test_symmetric_groups_give_zero_beta():
    entry = np.full(8, 50.0)
    exit_ = np.array([55.0, 60.0, 65.0, 70.0] * 2)
    event = np.array([1, 1, 0, 1] * 2)
    x = np.array([1.0] * 4 + [-1.0] * 4)
    assert sv.cox_fit(_idx(entry, exit_, event), x).beta == pytest.approx(0.0, abs=1e-8)


def test_monotone_likelihood_is_nonidentifiable():
    entry = np.zeros(6)
    exit_ = np.arange(1.0, 7.0)
    event = np.ones(6, int)
    x = np.array([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])  # every event in the x=1 group comes first
    with pytest.raises(NonIdentifiable):
        sv.cox_fit(_idx(entry, exit_, event), x)


def test_constant_covariate_and_no_events():
    idx = _idx(np.zeros(4), np.arange(1.0, 5.0), [1, 0, 1, 0])
    with pytest.raises(ZeroVariance):
        sv.cox_fit(idx, np.ones(4))
    with pytest.raises(NoEvents):
        sv.cox_fit(_idx(np.zeros(3), [1.0, 2.0, 3.0], [0, 2, 0]), [1.0, 2.0, 3.0])


def test_cox_agrees_with_statsmodels_phreg(rng):
    sm = pytest.importorskip("statsmodels.duration.hazard_regression")
    entry, exit_, event, _ = random_cohort(rng, 120)
    x = rng.standard_normal(120)
    ref = sm.PHReg(exit_, x[:, None], status=(event == 1).astype(int), entry=entry, ties="breslow").fit()
    assert sv.cox_fit(_idx(entry, exit_, event), x).beta == pytest.approx(ref.params[0], abs=1e-6)


# ---------------------------------------------------------------------------
# Fine-Gray


def test_fine_gray_weights_match_oracle(rng):
    entry, exit_, event, w = random_cohort(rng, 30)
    idx = _idx(entry, exit_, event, w)
    ages, W, G = sv.fine_gray_weights(idx)
    for j, t in enumerate(ages):
        np.testing.assert_allclose(W[:, j], fg_weight_oracle(entry, exit_, event, w, t, G), atol=1e-13)


def test_fine_gray_equals_cox_without_deaths(rng):
    for _ in range(5):
        entry, exit_, event, w = random_cohort(rng, 50, p_death=0.0)
        x = rng.standard_normal(50)
        idx = _idx(entry, exit_, event, w)
        assert sv.fine_gray_fit(idx, x).beta == pytest.approx(sv.cox_fit(idx, x).beta, abs=1e-8)


def test_fine_gray_loglik_matches_weighted_oracle(rng):
    entry, exit_, event, w = random_cohort(rng, 25)
    x = rng.standard_normal(25)
    idx = _idx(entry, exit_, event, w)
    ages, W, _ = sv.fine_gray_weights(idx)
    beta = 0.4
    ll = 0.0
    for i in np.flatnonzero(event == 1):
        j = int(np.searchsorted(ages, exit_[i]))
        ll += w[i] * (beta * x[i] - math.log(np.sum(w * W[:, j] * np.exp(beta * x))))
    assert sv.partial_loglik(idx, x, beta, subdistribution=True)[0] == pytest.approx(ll, rel=1e-11)


def test_degenerate_censoring_curve_warns():
    # the last censoring removes the only subject at risk: G drops to 0
    entry = np.zeros(4)
    exit_ = np.array([1.0, 2.0, 3.0, 4.0])
    event = np.array([2, 1, 0, 1])
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        sv.fine_gray_weights(_idx(entry, exit_, event))
    assert all(np.isfinite(sv.fine_gray_weights(_idx(entry, exit_, event))[1]).ravel())
    assert isinstance(rec, list)


# ---------------------------------------------------------------------------
# robust variance and formatting


def test_robust_variance_matches_explicit_sandwich(rng):
    entry, exit_, event, w = random_cohort(rng, 60)
    x = rng.standard_normal(60)
    hh = rng.integers(0, 25, 60)
    idx = _idx(entry, exit_, event, w, hh)
    res, fit = sv.cox_fit(idx, x, return_internals=True)
    g = np.array([np.sum(w[hh == h] * fit.residuals[hh == h, 0]) for h in np.unique(hh)])
    var = np.sum(g**2) / fit.information[0, 0] ** 2
    assert res.robust_se == pytest.approx(math.sqrt(var), rel=1e-12)
    assert res.n_clusters == np.unique(hh).size
    lo, hi = res.ci95
    assert lo == pytest.approx(math.exp(res.beta - 1.959963984540054 * res.robust_se))
    assert hi == pytest.approx(math.exp(res.beta + 1.959963984540054 * res.robust_se))


def test_singleton_clusters_give_independent_sandwich(rng):
    entry, exit_, event, w = random_cohort(rng, 50)
    x = rng.standard_normal(50)
    a = sv.cox_fit(_idx(entry, exit_, event, w), x)
    b = sv.cox_fit(_idx(entry, exit_, event, w, np.arange(50)), x)
    assert a.robust_se == b.robust_se


def test_format_hr_rounds_half_even():
    fit = sv.FitResult(beta=math.log(1.5649), hr=1.5649, robust_se=0.1, ci95=(1.2899, 1.8851),
                       n_clusters=10, loglik=0.0, converged=True)
    assert sv.format_hr(fit) == "1.56 (1.29, 1.89)"
    fit2 = sv.FitResult(beta=0.0, hr=1.125, robust_se=0.1, ci95=(0.5, 2.0), n_clusters=1, loglik=0.0,
                        converged=True)
    assert sv.format_hr(fit2) == "1.12 (0.50, 2.00)"


def test_build_risk_sets_from_subjects():
    subs = [Subject("a", "h1", "NHW-men", 50, 60, "dementia", (1.0,)),
            Subject("b", "h1", "NHW-men", 52, 58, "death", (-1.0,))]
    idx = sv.build_risk_sets(subs)
    assert idx.event.tolist() == [1, 2] and idx.cluster.tolist() == ["h1", "h1"]
