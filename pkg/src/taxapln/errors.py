"""Shared exception hierarchy."""


class TaxaPlnError(Exception):
    """Base class for all package errors."""


class ConfigError(TaxaPlnError):
    """Invalid configuration."""


class DataError(TaxaPlnError):
    """Malformed or inconsistent input data."""


class NumericError(TaxaPlnError):
    """Numerical failure (non-finite loss, singular system, ...)."""


# taxonomy
class RaggedLineageError(DataError):
    pass


class DuplicateLeafError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class HierarchyViolationError(DataError):
    pass


# ingest
class NonNumericCellError(DataError):
    pass


class NegativeValueError(DataError):
    pass


class RowSumViolationError(DataError):
    pass


class AllTaxaRemovedError(DataError):
    pass


class ZeroRowError(DataError):
    pass


class NonPositiveEntryError(DataError):
    pass


class UnknownCategoryError(DataError):
    pass


class MissingValueError(DataError):
    pass


class CovariateDimensionMismatchError(DataError):
    pass


# autodiff / model
class NonScalarOutputError(NumericError):
    pass


class NonFiniteLossError(NumericError):
    pass


# augment
class EmptyTrainingSetError(DataError):
    pass


class DegenerateMixError(NumericError):
    pass


class MissingLabelModelError(ConfigError):
    pass


class InvalidRatioError(ConfigError):
    pass


# metrics / eval
class DegenerateInputError(DataError):
    pass


class SingleClassError(DataError):
    pass


class RankTooSmallError(NumericError):
    pass


class FractionTooSmallError(DataError):
    pass
