"""Synthetic competing-risks cohorts with known truth.

Latent event ages for each cause are drawn by inverse transform of the
conditional cumulative hazard ``H_k(t | x) = H_0k(t) exp(beta_k' x)`` given
survival to the entry age, so the data are left truncated by construction.
The observed outcome is the earliest of the latent ages and the censoring age.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import STRATA, CodingKind, CovariateSpec, Domain, Event, Subject
from .errors import InfeasibleConfig
from .tables import AnalysisTable


@dataclass(frozen=True)
class Hazard:
    """Baseline hazard on age: constant ``rate`` or Weibull ``(age/scale)**shape``."""

    kind: str = "constant"
    rate: float = 0.01
    shape: float = 1.0
    scale: float = 100.0

    def __post_init__(self):
        if self.kind not in ("constant", "weibull"):
            raise InfeasibleConfig(f"unknown hazard kind {self.kind!r}")
        if self.rate < 0 or self.shape <= 0 or self.scale <= 0:
            raise InfeasibleConfig("hazard parameters must be nonnegative (shape, scale positive)")

    @property
    def is_zero(self) -> bool:
        return self.kind == "constant" and self.rate == 0

    def cumulative(self, age):
        age = np.asarray(age, dtype=float)
        if self.kind == "constant":
            return self.rate * age
        return (age / self.scale) ** self.shape

    def inverse(self, H):
        H = np.asarray(H, dtype=float)
        if self.kind == "constant":
            return H / self.rate if self.rate > 0 else np.full_like(H, np.inf)
        return self.scale * H ** (1.0 / self.shape)

    @classmethod
    def coerce(cls, h) -> "Hazard":
        if isinstance(h, Hazard):
            return h
        if isinstance(h, (int, float)):
            return cls("constant", float(h))
        return cls(**h)


@dataclass(frozen=True)
class SynthConfig:
    n: int = 1000
    n_binary: int = 0
    n_continuous: int = 1
    binary_prob: float = 0.5
    entry_age: tuple = (50.0, 80.0)
    dementia_hazard: Hazard = field(default_factory=lambda: Hazard("constant", 0.02))
    death_hazard: Hazard = field(default_factory=lambda: Hazard("constant", 0.03))
    beta_dementia: tuple = ()
    beta_death: tuple = ()
    censoring_rate: float = 0.05
    max_followup: float | None = None
    household_max: int = 1
    weight_sigma: float = 0.0
    missing_rate: float | tuple = 0.0
    strata: tuple = STRATA
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dementia_hazard", Hazard.coerce(self.dementia_hazard))
        object.__setattr__(self, "death_hazard", Hazard.coerce(self.death_hazard))
        M = self.M
        for name in ("beta_dementia", "beta_death"):
            b = tuple(float(v) for v in getattr(self, name)) or (0.0,) * M
            if len(b) != M:
                raise InfeasibleConfig(f"{name} has length {len(b)}, expected {M}")
            object.__setattr__(self, name, b)
        if self.n < 1:
            raise InfeasibleConfig("n must be positive")
        if self.censoring_rate < 0:
            raise InfeasibleConfig("censoring_rate must be nonnegative")
        lo, hi = self.entry_age
        if not 0 < lo <= hi:
            raise InfeasibleConfig("entry ages must satisfy 0 < low <= high")
        if self.dementia_hazard.is_zero and self.death_hazard.is_zero and self.censoring_rate == 0 and self.max_followup is None:
            raise InfeasibleConfig("all hazards are zero and there is no censoring: follow-up never ends")
        if self.household_max < 1:
            raise InfeasibleConfig("household_max must be >= 1")

    @property
    def M(self) -> int:
        return self.n_binary + self.n_continuous

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entry_age"] = list(self.entry_age)
        d["strata"] = list(self.strata)
        return d


@dataclass
class SynthCohort:
    subjects: list
    specs: list
    X_true: np.ndarray
    X: np.ndarray  # with injected missingness
    truth: dict
    latent: dict

    def table(self) -> AnalysisTable:
        t = AnalysisTable.from_subjects(self.subjects, self.specs)
        t.X = self.X.copy()
        return t


def _latent_age(h: Hazard, entry, lp, rng):
    e = rng.exponential(size=entry.shape[0])
    if h.is_zero:
        return np.full(entry.shape[0], np.inf)
    return h.inverse(h.cumulative(entry) + e * np.exp(-lp))


def synth_cohort(cfg: SynthConfig) -> SynthCohort:
    """Simulate ``cfg.n`` subjects; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n, M = cfg.n, cfg.M
    Xb = np.where(rng.random((n, cfg.n_binary)) < cfg.binary_prob, 1.0, -1.0)
    Xc = rng.standard_normal((n, cfg.n_continuous))
    X = np.hstack((Xb, Xc))
    lo, hi = cfg.entry_age
    entry = rng.uniform(lo, hi, n) if hi > lo else np.full(n, lo)
    lp_dem = X @ np.asarray(cfg.beta_dementia)
    lp_death = X @ np.asarray(cfg.beta_death)
    t_dem = _latent_age(cfg.dementia_hazard, entry, lp_dem, rng)
    t_death = _latent_age(cfg.death_hazard, entry, lp_death, rng)
    c = entry + (rng.exponential(1.0 / cfg.censoring_rate, n) if cfg.censoring_rate > 0 else np.inf)
    if cfg.max_followup is not None:
        c = np.minimum(c, entry + cfg.max_followup)
    exit_ = np.minimum.reduce([t_dem, t_death, c])
    event = np.where(exit_ == t_dem, int(Event.DEMENTIA), np.where(exit_ == t_death, int(Event.DEATH), int(Event.CENSORED)))
    exit_ = np.maximum(exit_, np.nextafter(entry, np.inf))

    sizes = []
    while sum(sizes) < n:
        sizes.append(int(rng.integers(1, cfg.household_max + 1)))
    household = np.repeat(np.arange(len(sizes)), sizes)[:n]
    weight = np.exp(cfg.weight_sigma * rng.standard_normal(n)) if cfg.weight_sigma > 0 else np.ones(n)
    stratum = np.asarray(cfg.strata)[rng.integers(0, len(cfg.strata), n)] if cfg.strata else np.full(n, "")

    rate = np.broadcast_to(np.asarray(cfg.missing_rate, dtype=float), (M,))
    miss = rng.random((n, M)) < rate[None, :]
    X_obs = np.where(miss, np.nan, X)

    specs = [
        CovariateSpec(f"b{j + 1}", Domain.HEALTH, CodingKind.BINARY_PM1, missing_fraction=float(miss[:, j].mean()))
        for j in range(cfg.n_binary)
    ] + [
        CovariateSpec(f"z{j + 1}", Domain.HEALTH, CodingKind.STANDARDIZED_CONTINUOUS, missing_fraction=float(miss[:, cfg.n_binary + j].mean()))
        for j in range(cfg.n_continuous)
    ]
    subjects = [
        Subject(
            id=f"s{i + 1}",
            household_id=f"h{household[i] + 1}",
            stratum=str(stratum[i]),
            entry_age=float(entry[i]),
            exit_age=float(exit_[i]),
            event=Event(int(event[i])),
            covariates=tuple(X_obs[i].tolist()),
            base_weight=float(weight[i]),
            analysis_weight=float(weight[i]),
        )
        for i in range(n)
    ]
    truth = {
        "beta_dementia": list(cfg.beta_dementia),
        "beta_death": list(cfg.beta_death),
        "hr_dementia": [math.exp(b) for b in cfg.beta_dementia],
        "config": cfg.to_dict(),
    }
    latent = {"dementia": t_dem, "death": t_death, "censoring": c}
    return SynthCohort(subjects, specs, X, X_obs, truth, latent)


def to_long_rows(cohort: SynthCohort, interval: float = 2.0, seed: int = 0) -> list:
    """Long-format interview records whose derived events reproduce the cohort.

    Waves are spaced ``interval`` years from entry; a final wave sits at the
    exit age.  Dementia-free waves carry passing cognitive scores, the
    dementia wave a failing one.  Deaths are recorded as ``dead@<age>``.
    Raw covariates are written as yes/no flags or rescaled numbers.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i, s in enumerate(cohort.subjects):
        ages = list(np.arange(s.entry_age, s.exit_age, interval))
        raw = {}
        for spec, v in zip(cohort.specs, s.covariates):
            if math.isnan(v):
                raw[spec.name] = ""
            elif spec.is_binary:
                raw[spec.name] = "yes" if v > 0 else "no"
            else:
                raw[spec.name] = repr(50.0 + 10.0 * v)
        base = {"id": s.id, "household_id": s.household_id, "stratum": s.stratum, "base_weight": repr(s.base_weight)}
        for a in ages:
            proxy = rng.random() < 0.1
            rows.append(
                dict(base, interview_age=repr(float(a)), respondent_kind="proxy" if proxy else "self",
                     self_score="" if proxy else str(rng.integers(7, 28)),
                     proxy_score=str(rng.integers(0, 6)) if proxy else "", vital_status="alive", **raw)
            )
        last = dict(base, interview_age=repr(float(s.exit_age)), respondent_kind="", self_score="", proxy_score="",
                    vital_status="alive", **raw)
        if s.event is Event.DEMENTIA:
            last.update(respondent_kind="self", self_score=str(rng.integers(0, 7)))
        elif s.event is Event.DEATH:
            last.update(vital_status=f"dead@{s.exit_age!r}")
        else:
            last.update(respondent_kind="self", self_score=str(rng.integers(7, 28)))
        rows.append(last)
    return rows
