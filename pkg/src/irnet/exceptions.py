"""Exception types raised across the package."""


class IRNetError(Exception):
    """Base class for all package errors."""


class ContractError(IRNetError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for a primitive."""


class NumericError(IRNetError, FloatingPointError):
    """A computation produced or received a non-finite value."""


class NumericWarning(RuntimeWarning):
    pass


class DeterminismError(IRNetError):
    """Two evaluations of the same loss builder disagreed."""


class VocabularyError(IRNetError, KeyError):
    pass


class DataParseError(IRNetError, ValueError):
    pass


class CatalogError(IRNetError, KeyError):
    pass


class SamplingError(IRNetError):
    pass


class CheckpointError(IRNetError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass
