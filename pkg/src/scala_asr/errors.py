"""Exception hierarchy.

The CLI maps these onto exit codes: ``ConfigError`` is a usage problem (1),
``DataError`` subclasses are data/validation problems (2) and everything else
derived from ``ScalaError`` is a runtime or numeric failure (3).
"""


class ScalaError(Exception):
    pass


class ConfigError(ScalaError):
    pass


class DataError(ScalaError):
    pass


class MissingUtteranceError(DataError, LookupError):
    pass


class AlignmentCoverageError(DataError):
    pass


class InventoryError(DataError):
    pass


class GenerationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ParseError(DataError):
    pass


class NumericError(ScalaError):
    pass


class DimensionError(NumericError, ValueError):
    pass


class DomainError(NumericError, ValueError):
    pass


class ContractError(NumericError):
    pass


class EmptyInputError(NumericError, ValueError):
    pass


class CheckInvalidError(NumericError):
    pass


class InfeasibleTargetError(NumericError):
    pass


class SimilarityUndefinedError(NumericError):
    pass


class NoAnchorsError(NumericError):
    pass


class StepError(NumericError):
    pass
