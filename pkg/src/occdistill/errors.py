"""Exception hierarchy shared by every module."""


class OccDistillError(Exception):
    """Base class for library errors."""


class DimensionError(OccDistillError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(OccDistillError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class ContractError(OccDistillError, RuntimeError):
    """A precondition of an operation was violated."""


class DomainError(OccDistillError, ValueError):
    """Input values lie outside the mathematical domain of the operation."""


class IncompatibilityError(OccDistillError):
    """Two parameter sets (or a checkpoint and a spec) do not share an architecture."""


class FormatError(OccDistillError):
    """A file on disk is malformed or truncated."""


class ConsistencyError(OccDistillError):
    """Two inputs that must agree (counts, labels) disagree."""


class DatasetError(OccDistillError):
    """A dataset is empty or cannot serve the requested operation."""


class StratificationError(DatasetError):
    """A class has too few samples for a stratified split."""


class TrainingError(OccDistillError):
    """Training cannot proceed with the given data."""
