"""Exception hierarchy shared across the pipeline."""


class ProcrepError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ProcrepError):
    """Invalid configuration value, flag combination, or missing mapping entry."""


class DataError(ProcrepError):
    """Input data cannot be used as requested."""


class ParseError(DataError):
    """Log file is structurally unreadable (bad header, unreadable container)."""


class ContractViolation(ProcrepError):
    """Caller broke an operation precondition (empty sequence, bad index, shape)."""


class EncodingError(ContractViolation):
    """Vocabulary index out of range at embedding time."""


class LeakageError(ContractViolation):
    """Response-status features reached a pipeline that must not see them."""


class GenerationError(ProcrepError):
    """Cohort configuration cannot produce a feasible event log."""


class StratificationError(DataError):
    """Stratified split impossible for the requested fold count."""


class UndefinedMetricError(DataError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class TrainingDivergedError(ProcrepError):
    """Training loss became non-finite."""


class VocabularyMismatchError(DataError):
    """Checkpoint was produced with a different vocabulary than supplied."""
