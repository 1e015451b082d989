"""Weighted competing-risks estimators on the age timescale.

All estimators accept left-truncated data: a subject is in the risk set at
age ``t`` iff ``entry_age < t <= exit_age``.  Event codes follow
:class:`crsurv.data.Event` (0 censored, 1 dementia, 2 death).

The proportional hazards fits (cause-specific Cox and Fine-Gray) share one
engine.  Each subject contributes a *conventional* at-risk interval
``(entry, exit]`` and, for the Fine-Gray model only, a *tail* after a
competing event during which it stays in the subdistribution risk set with
weight ``G(t-) / G(T_i-)``, ``G`` being the censoring survivor function.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from .data import Event, subject_arrays
from .errors import (
    EmptyCohort,
    NoEvents,
    NonIdentifiable,
    NotConverged,
    SingularInformation,
    ZeroVariance,
)

__all__ = [
    "RiskSetIndex",
    "SurvCurve",
    "CifCurve",
    "FitResult",
    "PHFit",
    "DegenerateCensoringCurve",
    "build_risk_sets",
    "kaplan_meier",
    "aalen_johansen",
    "censoring_survival",
    "fine_gray_weights",
    "cox_fit",
    "fine_gray_fit",
    "robust_cluster_variance",
    "format_hr",
]

Z95 = 1.959963984540054
LOGLIK_RTOL = 1e-10
MAX_NEWTON = 25
MAX_HALVINGS = 40


class DegenerateCensoringCurve(UserWarning):
    """The censoring survivor function reached zero before the last event age."""


class SingleClusterWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# risk sets and product-limit curves


@dataclass(frozen=True)
class RiskSetIndex:
    """Immutable index over a left-truncated cohort.

    At-risk counts are answered in O(log n) from two sorted age arrays:
    ``Y(t) = W(entry < t) - W(exit < t)`` (every subject exiting before
    ``t`` also entered before it).
    """

    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    weight: np.ndarray
    cluster: np.ndarray
    event_ages: np.ndarray
    _entry_sorted: np.ndarray = field(repr=False)
    _entry_cumw: np.ndarray = field(repr=False)
    _exit_sorted: np.ndarray = field(repr=False)
    _exit_cumw: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, entry, exit, event, weight=None, cluster=None) -> "RiskSetIndex":
        entry = np.asarray(entry, dtype=float)
        exit = np.asarray(exit, dtype=float)
        event = np.asarray(event, dtype=np.int64)
        n = entry.shape[0]
        if n == 0:
            raise EmptyCohort("no subjects")
        if exit.shape != (n,) or event.shape != (n,):
            raise ValueError("entry, exit and event must have equal length")
        if np.any(~(exit > entry)):
            raise ValueError("every subject needs exit_age > entry_age")
        if np.any((event < 0) | (event > 2)):
            raise ValueError("event codes must be 0, 1 or 2")
        weight = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
        if weight.shape != (n,) or np.any(weight < 0) or not np.all(np.isfinite(weight)):
            raise ValueError("weights must be finite and nonnegative")
        if cluster is None:
            cluster = np.arange(n)
        cluster = np.asarray(cluster)
        oe = np.argsort(entry, kind="stable")
        ox = np.argsort(exit, kind="stable")
        return cls(
            entry=entry,
            exit=exit,
            event=event,
            weight=weight,
            cluster=cluster,
            event_ages=np.unique(exit[event > 0]),
            _entry_sorted=entry[oe],
            _entry_cumw=np.concatenate(([0.0], np.cumsum(weight[oe]))),
            _exit_sorted=exit[ox],
            _exit_cumw=np.concatenate(([0.0], np.cumsum(weight[ox]))),
        )

    @property
    def n(self) -> int:
        return self.entry.shape[0]

    def at_risk(self, t: float) -> np.ndarray:
        return (self.entry < t) & (t <= self.exit)

    def n_at_risk(self, t, weighted: bool = True):
        """Size of the risk set at age(s) ``t``."""
        t = np.asarray(t, dtype=float)
        a = np.searchsorted(self._entry_sorted, t, side="left")
        b = np.searchsorted(self._exit_sorted, t, side="left")
        if weighted:
            return self._entry_cumw[a] - self._exit_cumw[b]
        return a - b

    def events_at(self, t: float, kinds=(Event.DEMENTIA, Event.DEATH)) -> float:
        m = (self.exit == t) & np.isin(self.event, [int(k) for k in kinds])
        return float(self.weight[m].sum())

    def subset(self, mask) -> "RiskSetIndex":
        mask = np.asarray(mask)
        return RiskSetIndex.from_arrays(
            self.entry[mask], self.exit[mask], self.event[mask], self.weight[mask], self.cluster[mask]
        )

    def with_weights(self, weight) -> "RiskSetIndex":
        return RiskSetIndex.from_arrays(self.entry, self.exit, self.event, weight, self.cluster)


def build_risk_sets(subjects) -> RiskSetIndex:
    if len(subjects) == 0:
        raise EmptyCohort("no subjects")
    entry, exit_, event, weight, cluster, _ = subject_arrays(subjects)
    return RiskSetIndex.from_arrays(entry, exit_, event, weight, cluster)


@dataclass(frozen=True)
class SurvCurve:
    """Right-continuous step function starting at 1."""

    ages: np.ndarray
    survival: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.ages, t, side="right")
        return np.concatenate(([1.0], self.survival))[i]

    def left(self, t):
        """Value just before ``t``."""
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.ages, t, side="left")
        return np.concatenate(([1.0], self.survival))[i]


@dataclass(frozen=True)
class CifCurve:
    """Aalen-Johansen cumulative incidence per cause plus all-cause survival."""

    ages: np.ndarray
    cif: dict
    survival: np.ndarray

    def __call__(self, t, cause=Event.DEMENTIA):
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.ages, t, side="right")
        return np.concatenate(([0.0], self.cif[Event.parse(cause)]))[i]


_TARGETS = {
    "all": (Event.DEMENTIA, Event.DEATH),
    "dementia": (Event.DEMENTIA,),
    "death": (Event.DEATH,),
    "censoring": (Event.CENSORED,),
}


def _resolve_target(target) -> tuple:
    if isinstance(target, str):
        try:
            return _TARGETS[target]
        except KeyError:
            raise ValueError(f"unknown KM target {target!r}") from None
    return tuple(Event.parse(t) for t in target)


def _risk_and_events(entry, exit_, event, weight, ages, kinds):
    """Weighted risk-set sizes and per-kind event weights at ``ages``."""
    s = np.searchsorted(ages, entry, side="right")
    e = np.searchsorted(ages, exit_, side="right")
    J = ages.shape[0]
    # reverse cumulative sums keep late (small) risk sets accurate
    y = _rev_cumsum(np.bincount(e, weights=weight, minlength=J + 1))[1:] - _rev_cumsum(
        np.bincount(s, weights=weight, minlength=J + 1)
    )[1:]
    pos = e - 1
    d = {}
    for k in kinds:
        m = event == int(k)
        d[k] = np.bincount(pos[m], weights=weight[m], minlength=J)[:J] if m.any() else np.zeros(J)
    return y[:J], d


def _rev_cumsum(a):
    return np.cumsum(a[::-1], axis=0)[::-1]


def kaplan_meier(idx: RiskSetIndex, target="all") -> SurvCurve:
    """Weighted product-limit estimator.

    ``target`` picks what counts as an event: ``"all"``, ``"dementia"``,
    ``"death"``, ``"censoring"`` (the censoring survivor function used for
    IPCW) or an explicit collection of :class:`Event` codes.
    """
    kinds = _resolve_target(target)
    m = np.isin(idx.event, [int(k) for k in kinds])
    ages = np.unique(idx.exit[m & (idx.weight > 0)])
    if ages.size == 0:
        return SurvCurve(ages=ages, survival=np.empty(0))
    y, d = _risk_and_events(idx.entry, idx.exit, idx.event, idx.weight, ages, kinds)
    dj = sum(d.values())
    surv = np.cumprod(1.0 - dj / y)
    return SurvCurve(ages=ages, survival=np.clip(surv, 0.0, 1.0))


def aalen_johansen(idx: RiskSetIndex) -> CifCurve:
    return _aalen_johansen_arrays(idx.entry, idx.exit, idx.event, idx.weight)


def _aalen_johansen_arrays(entry, exit_, event, weight) -> CifCurve:
    causes = (Event.DEMENTIA, Event.DEATH)
    ages = np.unique(exit_[(event > 0) & (weight > 0)])
    if ages.size == 0:
        return CifCurve(ages=ages, cif={c: np.empty(0) for c in causes}, survival=np.empty(0))
    y, d = _risk_and_events(entry, exit_, event, weight, ages, causes)
    # rounding in the risk-set sums can leave y a hair below the events
    y = np.maximum(y, d[Event.DEMENTIA] + d[Event.DEATH])
    hazard = (d[Event.DEMENTIA] + d[Event.DEATH]) / y
    surv = np.clip(np.cumprod(1.0 - hazard), 0.0, 1.0)
    s_prev = np.concatenate(([1.0], surv[:-1]))
    cif = {c: np.cumsum(s_prev * d[c] / y) for c in causes}
    return CifCurve(ages=ages, cif=cif, survival=surv)


def censoring_survival(idx: RiskSetIndex) -> SurvCurve:
    """KM of the censoring distribution on the same left-truncated timescale."""
    return kaplan_meier(idx, target="censoring")


# ---------------------------------------------------------------------------
# proportional hazards engine


@dataclass(frozen=True)
class _PHDesign:
    times: np.ndarray  # distinct event ages of the cause of interest
    s: np.ndarray  # first grid index at risk
    e: np.ndarray  # one past last conventional grid index
    is_event: np.ndarray
    d: np.ndarray  # weighted event count per grid age
    weight: np.ndarray
    tail: np.ndarray  # carried forward after a competing event
    tail_c: np.ndarray  # 1 / G(T_i-) for tail subjects, 0 otherwise
    g: np.ndarray  # G(t_j-) on the grid (ones for cause-specific fits)


def _design(idx: RiskSetIndex, cause: Event, subdistribution: bool) -> _PHDesign:
    cause = Event.parse(cause)
    if cause not in (Event.DEMENTIA, Event.DEATH):
        raise ValueError("cause must be dementia or death")
    is_event = (idx.event == int(cause)) & (idx.weight > 0)
    if not is_event.any():
        raise NoEvents(f"no {cause.label} events")
    times = np.unique(idx.exit[is_event])
    J = times.shape[0]
    s = np.searchsorted(times, idx.entry, side="right")
    e = np.searchsorted(times, idx.exit, side="right")
    d = np.bincount(e[is_event] - 1, weights=idx.weight[is_event], minlength=J)
    n = idx.n
    tail = np.zeros(n, dtype=bool)
    tail_c = np.zeros(n)
    g = np.ones(J)
    if subdistribution:
        competing = Event.DEATH if cause is Event.DEMENTIA else Event.DEMENTIA
        tail = (idx.event == int(competing)) & (e < J)
        gcurve = censoring_survival(idx)
        g_raw = gcurve.left(times)
        gi_raw = gcurve.left(idx.exit)
        g = _forward_fill_positive(g_raw, times, gcurve)
        gi = _forward_fill_positive(gi_raw, idx.exit, gcurve)
        if np.any(g_raw[_tail_reach(e, tail, J)] <= 0):
            warnings.warn(
                "censoring survivor curve reaches 0 before the last event age; "
                "carrying the last positive weight ratio forward",
                DegenerateCensoringCurve,
                stacklevel=3,
            )
        tail_c[tail] = 1.0 / gi[tail]
    return _PHDesign(times, s, e, is_event, d, idx.weight, tail, tail_c, g)


def _tail_reach(e, tail, J):
    mask = np.zeros(J, dtype=bool)
    if tail.any():
        mask[int(e[tail].min()):] = True
    return mask


def _forward_fill_positive(values, ages, curve: SurvCurve):
    """Replace zeros of ``G(t-)`` by the last positive value of the curve."""
    values = np.asarray(values, dtype=float).copy()
    bad = values <= 0
    if bad.any():
        positive = curve.survival[curve.survival > 0]
        values[bad] = positive[-1] if positive.size else 1.0
    return values


def _interval_sum(design: _PHDesign, a: np.ndarray) -> np.ndarray:
    """Sum of per-subject quantities ``a`` over the (sub)distribution risk set.

    ``a`` has shape (n, ...); the result has shape (J, ...).
    """
    J = design.times.shape[0]
    flat = a.reshape(a.shape[0], -1)
    out = np.empty((J, flat.shape[1]))
    tail = design.tail
    for c in range(flat.shape[1]):
        col = flat[:, c]
        conv = _rev_cumsum(np.bincount(design.e, weights=col, minlength=J + 1))[1:] - _rev_cumsum(
            np.bincount(design.s, weights=col, minlength=J + 1)
        )[1:]
        out[:, c] = conv[:J]
        if tail.any():
            t = np.cumsum(np.bincount(design.e[tail], weights=col[tail] * design.tail_c[tail], minlength=J + 1))[:J]
            out[:, c] += design.g * t
    return out.reshape((J,) + a.shape[1:])


@dataclass
class PHFit:
    """Internals of a fitted proportional hazards model (shared by both models)."""

    beta: np.ndarray
    loglik: float
    score: np.ndarray
    information: np.ndarray
    residuals: np.ndarray  # per-subject score residuals, not yet multiplied by weight
    weight: np.ndarray
    converged: bool
    iterations: int
    loglik_path: list
    n: int
    n_events: int
    model: str


def _ph_terms(beta, x, design: _PHDesign, want_hessian=True):
    eta = x @ beta
    shift = eta.max() if eta.size else 0.0
    r = np.exp(eta - shift)
    wr = design.weight * r
    S0 = _interval_sum(design, wr)
    S1 = _interval_sum(design, wr[:, None] * x)
    d = design.d
    ev = design.is_event
    loglik = float(np.sum(design.weight[ev] * eta[ev]) - np.sum(d * (np.log(S0) + shift)))
    xbar = S1 / S0[:, None]
    score = (design.weight[ev, None] * x[ev]).sum(axis=0) - (d[:, None] * xbar).sum(axis=0)
    if not want_hessian:
        return loglik, score, None, S0, xbar, r
    S2 = _interval_sum(design, wr[:, None, None] * x[:, :, None] * x[:, None, :])
    info = np.einsum("j,jkl->kl", d, S2 / S0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
    return loglik, score, info, S0, xbar, r


def _score_residuals(beta, x, design: _PHDesign, S0, xbar, r):
    """Per-subject score residuals; ``sum_i w_i res_i`` equals the score."""
    h = design.d / S0
    hx = h[:, None] * xbar
    ph = np.concatenate(([0.0], np.cumsum(h)))
    phx = np.vstack((np.zeros((1, x.shape[1])), np.cumsum(hx, axis=0)))
    s, e = design.s, design.e
    conv_h = ph[e] - ph[s]
    conv_hx = phx[e] - phx[s]
    comp = x * conv_h[:, None] - conv_hx
    if design.tail.any():
        gh = design.g * h
        sh = _rev_cumsum(np.concatenate((gh, [0.0])))
        shx = _rev_cumsum(np.vstack((gh[:, None] * xbar, np.zeros((1, x.shape[1])))))
        t = design.tail
        comp[t] += design.tail_c[t, None] * (x[t] * sh[e[t], None] - shx[e[t]])
    res = -r[:, None] * comp
    ev = design.is_event
    pos = design.e[ev] - 1
    res[ev] += x[ev] - xbar[pos]
    return res


def _fit_ph(idx: RiskSetIndex, x, cause, subdistribution: bool, model: str) -> PHFit:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != idx.n:
        raise ValueError("covariate length does not match the cohort")
    design = _design(idx, cause, subdistribution)
    w = idx.weight
    wsum = w.sum()
    mean = (w[:, None] * x).sum(axis=0) / wsum
    var = (w[:, None] * (x - mean) ** 2).sum(axis=0) / wsum
    if np.any(var <= 1e-14 * np.maximum(1.0, mean**2)):
        raise ZeroVariance("covariate has zero weighted variance")
    xc = x - mean  # centring leaves beta unchanged and improves conditioning

    beta = np.zeros(x.shape[1])
    ll, U, I, *_ = _ph_terms(beta, xc, design)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, MAX_NEWTON + 1):
        try:
            step = np.linalg.solve(I, U)
        except np.linalg.LinAlgError:
            raise SingularInformation("information matrix is singular") from None
        accepted = False
        for _ in range(MAX_HALVINGS):
            cand = beta + step
            ll_new, U_new, I_new, *_ = _ph_terms(cand, xc, design)
            if np.isfinite(ll_new) and ll_new >= ll:
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            # no ascent direction left at machine precision
            converged = bool(np.max(np.abs(U)) < 1e-6 * max(1.0, abs(ll)))
            break
        change = abs(ll_new - ll)
        beta, ll, U, I = cand, ll_new, U_new, I_new
        path.append(ll)
        if change <= LOGLIK_RTOL * max(abs(ll), 1e-300):
            converged = True
            break

    spread = x.max(axis=0) - x.min(axis=0)
    if np.any(np.abs(beta) * spread > 25.0):
        raise NonIdentifiable("partial likelihood has no finite maximum (coefficient diverges)")
    # a flat tail also stops the loglik test: curvature has vanished there
    if converged and np.any(np.diag(I) * spread**2 < 1e-8 * max(1, np.count_nonzero(design.is_event))):
        raise NonIdentifiable("partial likelihood is flat at the optimum (monotone likelihood)")
    if converged:
        # one polishing step; the loglik test leaves beta accurate only to ~sqrt(rtol)
        try:
            cand = beta + np.linalg.solve(I, U)
            U_new = _ph_terms(cand, xc, design, want_hessian=False)[1]
            if np.max(np.abs(U_new)) <= np.max(np.abs(U)):
                beta = cand
        except np.linalg.LinAlgError:
            pass
    if not converged:
        raise NotConverged(f"Newton-Raphson did not converge in {MAX_NEWTON} steps")
    ll, U, I, S0, xbar, r = _ph_terms(beta, xc, design)
    res = _score_residuals(beta, xc, design, S0, xbar, r)
    return PHFit(
        beta=beta,
        loglik=ll,
        score=U,
        information=I,
        residuals=res,
        weight=w,
        converged=converged,
        iterations=it,
        loglik_path=path,
        n=int(np.count_nonzero(w > 0)),
        n_events=int(np.count_nonzero(design.is_event)),
        model=model,
    )


def robust_cluster_variance(fit: PHFit, clusters) -> np.ndarray:
    """Cluster-robust sandwich ``I^-1 (sum_h g_h g_h') I^-1``.

    ``g_h`` is the weighted score residual summed within household ``h``.
    Returns the covariance matrix.
    """
    clusters = np.asarray(clusters)
    _, code = np.unique(clusters, return_inverse=True)
    wres = fit.weight[:, None] * fit.residuals
    G = np.zeros((code.max() + 1, wres.shape[1]))
    for c in range(wres.shape[1]):
        G[:, c] = np.bincount(code, weights=wres[:, c])
    if G.shape[0] == 1:
        warnings.warn("only one cluster: robust variance is degenerate", SingleClusterWarning, stacklevel=2)
    try:
        inv = np.linalg.inv(fit.information)
    except np.linalg.LinAlgError:
        raise SingularInformation("information matrix is singular") from None
    return inv @ (G.T @ G) @ inv


@dataclass(frozen=True)
class FitResult:
    beta: float
    hr: float
    robust_se: float
    ci95: tuple
    n_clusters: int
    loglik: float
    converged: bool
    n: int = 0
    n_events: int = 0
    model: str = ""

    @classmethod
    def from_beta(cls, beta, se, **kw) -> "FitResult":
        lo, hi = math.exp(beta - Z95 * se), math.exp(beta + Z95 * se)
        return cls(beta=beta, hr=math.exp(beta), robust_se=se, ci95=(lo, hi), **kw)


def _results(fit: PHFit, idx: RiskSetIndex):
    clusters = idx.cluster
    cov = robust_cluster_variance(fit, clusters)
    n_clusters = int(np.unique(clusters[fit.weight > 0]).size)
    out = []
    for k in range(fit.beta.shape[0]):
        out.append(
            FitResult.from_beta(
                float(fit.beta[k]),
                float(math.sqrt(max(cov[k, k], 0.0))),
                n_clusters=n_clusters,
                loglik=fit.loglik,
                converged=fit.converged,
                n=fit.n,
                n_events=fit.n_events,
                model=fit.model,
            )
        )
    return out


def cox_fit(idx: RiskSetIndex, x, cause=Event.DEMENTIA, return_internals: bool = False):
    """Weighted cause-specific Cox model, Breslow ties.

    Other event kinds are treated as censoring at their exit age.  A 1-D
    ``x`` gives one :class:`FitResult`; a 2-D ``x`` fits all columns jointly
    and returns a list.
    """
    fit = _fit_ph(idx, x, cause, subdistribution=False, model="causespecific")
    res = _results(fit, idx)
    out = res[0] if np.ndim(x) == 1 else res
    return (out, fit) if return_internals else out


def fine_gray_fit(idx: RiskSetIndex, x, cause=Event.DEMENTIA, return_internals: bool = False):
    """Fine-Gray subdistribution hazards model via IPCW-weighted risk sets."""
    fit = _fit_ph(idx, x, cause, subdistribution=True, model="finegray")
    res = _results(fit, idx)
    out = res[0] if np.ndim(x) == 1 else res
    return (out, fit) if return_internals else out


def fine_gray_weights(idx: RiskSetIndex, cause=Event.DEMENTIA):
    """Subdistribution weights ``w_i(t)`` on the event-age grid.

    Returns ``(ages, W, G)`` where ``W[i, j]`` is subject ``i``'s membership
    weight (before its analysis weight) in the risk set at ``ages[j]``.
    """
    design = _design(idx, cause, subdistribution=True)
    J = design.times.shape[0]
    j = np.arange(J)
    W = ((design.s[:, None] <= j) & (j < design.e[:, None])).astype(float)
    t = design.tail
    W[t] += (j >= design.e[t, None]) * design.g[None, :] * design.tail_c[t, None]
    return design.times, W, censoring_survival(idx)


def partial_loglik(idx: RiskSetIndex, x, beta, cause=Event.DEMENTIA, subdistribution=False):
    """Log partial likelihood at ``beta`` (for diagnostics)."""
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    design = _design(idx, cause, subdistribution)
    return _ph_terms(np.atleast_1d(np.asarray(beta, dtype=float)), x, design, want_hessian=False)[:2]


def format_hr(fit: FitResult) -> str:
    """``"H.HH (L.LL, U.UU)"`` with half-even rounding to two decimals."""

    def r2(v):
        return str(Decimal(repr(float(v))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))

    return f"{r2(fit.hr)} ({r2(fit.ci95[0])}, {r2(fit.ci95[1])})"
