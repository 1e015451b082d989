"""Analysis-ready subjects from long-format interview records.

Covers risk-oriented coding of covariates (``±1`` binaries, standardized
continuous scores), cognitive-score dementia classification, derivation of
the exit age and event kind on the age scale, and the missingness filter.
"""
from __future__ import annotations

import enum
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from .data import CovariateSpec, Event
from .errors import (
    BaselineDemented,
    CodingError,
    ConstantColumn,
    NonMonotoneAges,
    RankDeficientPCs,
    ScoreOutOfRange,
    TooFewValues,
)
from .tables import AnalysisTable, read_rows, to_float

log = logging.getLogger(__name__)

SELF_MAX = 27
PROXY_MAX = 11
SELF_CUT = 6  # dementia iff self score <= 6
PROXY_CUT = 6  # dementia iff proxy score >= 6
MISSING_THRESHOLD = 0.20
N_PCS = 10


class RespondentKind(str, enum.Enum):
    SELF = "self"
    PROXY = "proxy"


@dataclass(frozen=True)
class CognitionRecord:
    respondent_kind: RespondentKind
    self_score: int | None = None
    proxy_score: int | None = None
    interview_age: float = math.nan

    def __post_init__(self):
        kind = RespondentKind(str(getattr(self.respondent_kind, "value", self.respondent_kind)).strip().lower())
        object.__setattr__(self, "respondent_kind", kind)
        own, other, hi = (
            (self.self_score, self.proxy_score, SELF_MAX)
            if kind is RespondentKind.SELF
            else (self.proxy_score, self.self_score, PROXY_MAX)
        )
        if own is None:
            raise ScoreOutOfRange(f"{kind.value} record without a {kind.value} score")
        if other is not None:
            raise ScoreOutOfRange(f"{kind.value} record carries the other respondent kind's score")
        if int(own) != own or not 0 <= own <= hi:
            raise ScoreOutOfRange(f"{kind.value} score {own} outside 0..{hi}")


def classify_langa_weir(rec: CognitionRecord) -> bool:
    """Dementia flag from the self (0-27) or proxy (0-11) cognitive score."""
    if rec.respondent_kind is RespondentKind.SELF:
        return rec.self_score <= SELF_CUT
    return rec.proxy_score >= PROXY_CUT


# ---------------------------------------------------------------------------
# covariate coding


def _as_float_array(values) -> np.ndarray:
    return np.array([math.nan if v is None else float(v) for v in values], dtype=float)


def standardize(values, reverse: bool = False) -> np.ndarray:
    """Center and scale to unit sample sd over the non-missing entries.

    ``reverse`` flips the sign so larger values mean higher risk.  Missing
    entries (NaN/None) stay missing.
    """
    v = _as_float_array(values)
    ok = ~np.isnan(v)
    if ok.sum() < 2:
        raise TooFewValues("need at least two observed values")
    obs = v[ok]
    sd = obs.std(ddof=1)
    if not sd > 0:
        raise ConstantColumn("standard deviation is zero")
    out = np.full_like(v, np.nan)
    out[ok] = (obs - obs.mean()) / sd
    return -out if reverse else out


_YES = {"yes", "y", "true", "t", "1", "+1", "1.0"}
_NO = {"no", "n", "false", "f", "0", "-1", "0.0", "-1.0"}


def encode_binary(raw) -> float:
    """``yes -> +1``, ``no -> -1``, missing stays missing (NaN)."""
    if raw is None:
        return math.nan
    if isinstance(raw, (bool, np.bool_)):
        return 1.0 if raw else -1.0
    if isinstance(raw, (float, np.floating)) and math.isnan(raw):
        return math.nan
    key = str(raw).strip().lower()
    if key in ("", "na", "nan", "missing"):
        return math.nan
    if key in _YES:
        return 1.0
    if key in _NO:
        return -1.0
    raise CodingError(f"cannot read {raw!r} as a yes/no flag")


def filter_missingness(specs, threshold: float = MISSING_THRESHOLD) -> list:
    """Keep specs with ``missing_fraction < threshold``; order is preserved."""
    kept = []
    for s in specs:
        if s.missing_fraction >= threshold:
            log.info("excluding %s: %.1f%% missing", s.name, 100 * s.missing_fraction)
        else:
            kept.append(s)
    return kept


def residualize_pgs(pgs, pcs, reverse: bool = False) -> np.ndarray:
    """Standardized residuals of ``pgs`` regressed on ``pcs`` plus an intercept."""
    y = _as_float_array(pgs)
    P = np.asarray(pcs, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if np.isnan(y).any() or np.isnan(P).any():
        raise CodingError("polygenic scores and PCs must be complete")
    Z = np.hstack((np.ones((y.shape[0], 1)), P))
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RankDeficientPCs("principal component matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
    resid = y - Z @ coef
    scale = max(1.0, float(np.abs(y).max()))
    if np.max(np.abs(resid)) <= 1e-10 * scale:
        raise ConstantColumn("residual is zero: score is a linear combination of the PCs")
    return standardize(resid, reverse=reverse)


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class Wave:
    interview_age: float
    dementia: bool | None
    vital_status: str = "alive"

    @property
    def death_age(self) -> float | None:
        vs = str(self.vital_status).strip().lower()
        if not vs.startswith("dead"):
            return None
        _, _, at = vs.partition("@")
        return float(at) if at else float(self.interview_age)


def _wave(w) -> Wave:
    return w if isinstance(w, Wave) else Wave(*w)


def derive_event(waves) -> tuple:
    """Exit age and event kind from chronologically ordered waves.

    Dementia at the first positive wave wins; otherwise death at the
    recorded death age; otherwise censoring at the last interview age.
    """
    ws = [_wave(w) for w in waves]
    if not ws:
        raise CodingError("no waves")
    ages = [w.interview_age for w in ws]
    if any(b <= a for a, b in zip(ages, ages[1:])):
        raise NonMonotoneAges(f"interview ages not strictly increasing: {ages}")
    if ws[0].dementia:
        raise BaselineDemented("dementia at baseline")
    for w in ws:
        if w.dementia:
            return float(w.interview_age), Event.DEMENTIA
    for w in ws:
        d = w.death_age
        if d is not None:
            return max(float(d), ages[0]), Event.DEATH
    alive = [w.interview_age for w in ws if w.death_age is None]
    return float(alive[-1]), Event.CENSORED


# ---------------------------------------------------------------------------
# long -> wide


@dataclass(frozen=True)
class BuildConfig:
    missing_threshold: float = MISSING_THRESHOLD
    min_entry_age: float | None = None
    passthrough: tuple = ()
    pc_columns: tuple = tuple(f"pc{k}" for k in range(1, N_PCS + 1))


def _flag(text):
    f = encode_binary(text)
    return None if math.isnan(f) else f > 0


def _wave_dementia(row) -> bool | None:
    override = (row.get("event_override") or "").strip()
    if override:
        key = override.lower()
        if key in ("dementia",):
            return True
        if key in ("censored", "none", "alive", "death"):
            return False
        return _flag(override)
    kind = (row.get("respondent_kind") or "").strip().lower()
    if not kind:
        return None
    s, p = row.get("self_score", ""), row.get("proxy_score", "")
    rec = CognitionRecord(
        kind,
        self_score=int(float(s)) if s not in ("", None) and kind == "self" else None,
        proxy_score=int(float(p)) if p not in ("", None) and kind == "proxy" else None,
        interview_age=to_float(row.get("interview_age")),
    )
    return classify_langa_weir(rec)


def code_column(raw, spec: CovariateSpec, zero_mask=None, pcs=None) -> np.ndarray:
    """Apply one spec's coding to a raw column (strings or numbers)."""
    if spec.is_binary:
        v = np.array([encode_binary(r) for r in raw], dtype=float)
        return -v if spec.reverse_coded else v
    v = np.array([to_float(r) for r in raw], dtype=float)
    if spec.transform == "log":
        v = np.log(v)
    elif spec.transform == "log1p":
        v = np.log1p(v)
    elif spec.transform not in ("none", "", None):
        raise CodingError(f"{spec.name}: unknown transform {spec.transform!r}")
    if zero_mask is not None:
        v[zero_mask] = np.nan
    if spec.residualize_pcs:
        ok = ~np.isnan(v)
        if pcs is None:
            raise CodingError(f"{spec.name}: principal components required")
        out = np.full_like(v, np.nan)
        out[ok] = residualize_pgs(v[ok], pcs[ok], reverse=spec.reverse_coded)
        v = out
    else:
        v = standardize(v, reverse=spec.reverse_coded)
    if zero_mask is not None:
        v[zero_mask] = 0.0
    return v


def build_cohort(long_rows, specs, cfg: BuildConfig = BuildConfig()):
    """Long-format rows (dicts) to an :class:`AnalysisTable` plus a manifest.

    Subjects that violate a record invariant (baseline dementia, ages out of
    order, no valid sampling weight, no follow-up) are excluded and listed in
    the manifest with the reason.
    """
    by_id = OrderedDict()
    for r in long_rows:
        by_id.setdefault(r["id"], []).append(r)

    keep, excluded = [], []
    for sid, rows in by_id.items():
        try:
            waves = [
                Wave(to_float(r["interview_age"]), _wave_dementia(r), (r.get("vital_status") or "alive"))
                for r in rows
            ]
            exit_age, event = derive_event(waves)
        except CodingError as exc:
            excluded.append({"id": sid, "reason": type(exc).__name__, "detail": str(exc)})
            continue
        base = rows[0]
        entry = float(waves[0].interview_age)
        bw = to_float(base.get("base_weight", "1"))
        if not bw > 0:
            excluded.append({"id": sid, "reason": "InvalidWeight", "detail": f"base_weight={bw}"})
            continue
        if cfg.min_entry_age is not None and entry < cfg.min_entry_age:
            excluded.append({"id": sid, "reason": "BelowMinAge", "detail": f"entry_age={entry}"})
            continue
        if not exit_age > entry:
            excluded.append({"id": sid, "reason": "NoFollowUp", "detail": f"exit_age={exit_age}"})
            continue
        keep.append((sid, base, entry, exit_age, event, bw))

    n = len(keep)
    bases = [k[1] for k in keep]
    pcs = None
    if any(s.residualize_pcs for s in specs):
        pcs = np.array([[to_float(b.get(c)) for c in cfg.pc_columns] for b in bases], dtype=float)

    measured = []
    for s in specs:
        src = s.source or s.name
        raw = [b.get(src, "") for b in bases]
        zero_mask = None
        if s.zero_if:
            zero_mask = np.array([bool(_flag(b.get(s.zero_if, ""))) for b in bases], dtype=bool)
        if s.is_binary:
            miss = np.isnan(np.array([encode_binary(r) for r in raw], dtype=float))
        else:
            miss = np.isnan(np.array([to_float(r) for r in raw], dtype=float))
        if zero_mask is not None:
            miss &= ~zero_mask
        frac = float(miss.mean()) if n else 0.0
        measured.append((replace(s, missing_fraction=frac), raw, zero_mask))

    retained = filter_missingness([m[0] for m in measured], cfg.missing_threshold)
    kept_names = {s.name for s in retained}
    cols, out_specs = [], []
    for s, raw, zero_mask in measured:
        if s.name not in kept_names:
            continue
        cols.append(code_column(raw, s, zero_mask, pcs))
        out_specs.append(s)
    X = np.column_stack(cols) if cols else np.empty((n, 0))

    table = AnalysisTable(
        ids=[k[0] for k in keep],
        household=[k[1].get("household_id") or k[0] for k in keep],
        stratum=[k[1].get("stratum", "") for k in keep],
        entry=np.array([k[2] for k in keep], dtype=float),
        exit=np.array([k[3] for k in keep], dtype=float),
        event=np.array([int(k[4]) for k in keep], dtype=np.int64),
        base_weight=np.array([k[5] for k in keep], dtype=float),
        analysis_weight=np.array([k[5] for k in keep], dtype=float),
        X=X,
        specs=out_specs,
        extra={c: [b.get(c, "") for b in bases] for c in cfg.passthrough},
    )
    manifest = {
        "n_input_subjects": len(by_id),
        "n_subjects": n,
        "missing_threshold": cfg.missing_threshold,
        "min_entry_age": cfg.min_entry_age,
        "excluded_covariates": [
            {"name": s.name, "missing_fraction": s.missing_fraction} for s, _, _ in measured if s.name not in kept_names
        ],
        "excluded_subjects": excluded,
        "event_counts": {e.label: int(np.sum(table.event == int(e))) for e in Event},
    }
    table.manifest = manifest
    return table, manifest


def build_cohort_csv(path, specs, cfg: BuildConfig = BuildConfig()):
    _, rows = read_rows(path)
    return build_cohort(rows, specs, cfg)

