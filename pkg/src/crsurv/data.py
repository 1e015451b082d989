"""Core record types shared across modules."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

STRATA = ("NHW-men", "NHW-women", "NHB-men", "NHB-women")


class Event(enum.IntEnum):
    CENSORED = 0
    DEMENTIA = 1
    DEATH = 2

    @classmethod
    def parse(cls, value) -> "Event":
        if isinstance(value, Event):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().lower()
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown event kind {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class Domain(str, enum.Enum):
    SOCIODEMOGRAPHIC = "sociodemographic"
    EARLY_LIFE = "early-life"
    ECONOMIC = "economic"
    HEALTH = "health"
    BEHAVIORS = "behaviors"
    SOCIAL = "social"
    GENETIC = "genetic"


class CodingKind(str, enum.Enum):
    BINARY_PM1 = "binary_pm1"
    STANDARDIZED_CONTINUOUS = "standardized_continuous"


@dataclass(frozen=True)
class CovariateSpec:
    """One predictor definition and the transforms applied to build it."""

    name: str
    domain: Domain | None = None
    kind: CodingKind = CodingKind.STANDARDIZED_CONTINUOUS
    reverse_coded: bool = False
    missing_fraction: float = 0.0
    source: str | None = None
    transform: str = "none"
    residualize_pcs: bool = False
    zero_if: str | None = None
    sex_specific: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.missing_fraction <= 1.0:
            raise ValueError(f"{self.name}: missing_fraction {self.missing_fraction} outside [0, 1]")
        object.__setattr__(self, "kind", CodingKind(self.kind))
        if self.domain is not None:
            object.__setattr__(self, "domain", Domain(self.domain))

    @property
    def is_binary(self) -> bool:
        return self.kind is CodingKind.BINARY_PM1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "domain": None if self.domain is None else self.domain.value,
            "kind": self.kind.value,
            "reverse_coded": self.reverse_coded,
            "missing_fraction": self.missing_fraction,
            "source": self.source,
            "transform": self.transform,
            "residualize_pcs": self.residualize_pcs,
            "zero_if": self.zero_if,
            "sex_specific": self.sex_specific,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass(frozen=True)
class Subject:
    id: str
    household_id: str
    stratum: str
    entry_age: float
    exit_age: float
    event: Event
    covariates: tuple = field(default_factory=tuple)
    base_weight: float = 1.0
    analysis_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "event", Event.parse(self.event))
        if not self.exit_age > self.entry_age:
            raise ValueError(f"subject {self.id}: exit_age {self.exit_age} <= entry_age {self.entry_age}")
        if self.base_weight < 0 or self.analysis_weight < 0:
            raise ValueError(f"subject {self.id}: negative weight")


def subject_arrays(subjects):
    """Column-stack a subject list into the arrays used by the estimators."""
    n = len(subjects)
    entry = np.fromiter((s.entry_age for s in subjects), float, n)
    exit_ = np.fromiter((s.exit_age for s in subjects), float, n)
    event = np.fromiter((int(s.event) for s in subjects), np.int64, n)
    weight = np.fromiter((s.analysis_weight for s in subjects), float, n)
    cluster = np.array([s.household_id for s in subjects], dtype=object)
    if n and subjects[0].covariates:
        X = np.array([s.covariates for s in subjects], dtype=float)
    else:
        X = np.empty((n, 0))
    return entry, exit_, event, weight, cluster, X
