"""Competing-risks survival analysis on the age scale.

Cohort coding, forest imputation, selection weights, Fine-Gray and
cause-specific Cox models with cluster-robust errors, competing-risks
random survival forests with permutation importance, and rank aggregation
across strata.
"""
__version__ = "0.1.0"

from .data import STRATA, CodingKind, CovariateSpec, Domain, Event, Subject  # noqa: E402

__all__ = ["STRATA", "CodingKind", "CovariateSpec", "Domain", "Event", "Subject", "__version__"]
