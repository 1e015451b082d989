"""Exception hierarchy shared by every stage of the toolkit."""


class CrsurvError(Exception):
    """Base class for all errors raised by :mod:`crsurv`."""


# coding / cohort construction
class CodingError(CrsurvError, ValueError):
    pass


class ConstantColumn(CodingError):
    pass


class TooFewValues(CodingError):
    pass


class ScoreOutOfRange(CodingError):
    pass


class BaselineDemented(CodingError):
    pass


class NonMonotoneAges(CodingError):
    pass


class RankDeficientPCs(CodingError):
    pass


# imputation
class AllMissingColumn(CrsurvError, ValueError):
    pass


class EmptyMatrix(CrsurvError, ValueError):
    pass


# propensity weighting
class Separation(CrsurvError, ArithmeticError):
    pass


class SingularDesign(CrsurvError, ArithmeticError):
    pass


class NotConverged(CrsurvError, ArithmeticError):
    pass


# survival models
class EmptyCohort(CrsurvError, ValueError):
    pass


class ZeroVariance(CrsurvError, ValueError):
    pass


class NoEvents(CrsurvError, ValueError):
    pass


class NonIdentifiable(NotConverged):
    """The partial likelihood is monotone in the coefficient (no finite maximum)."""


class SingularInformation(CrsurvError, ArithmeticError):
    pass


# forests
class EmptySample(CrsurvError, ValueError):
    pass


class DimensionMismatch(CrsurvError, ValueError):
    pass


class NoUsablePairs(CrsurvError, ValueError):
    pass


class ForestFormatError(CrsurvError, ValueError):
    pass


# pipeline
class InconsistentPredictorSets(CrsurvError, ValueError):
    pass


class InfeasibleConfig(CrsurvError, ValueError):
    pass
