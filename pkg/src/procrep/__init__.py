"""Latent representations of student process data.

Learns sequence encoders over timestamped interaction logs with
self-supervised pre-training, transfers them to outcome prediction and
behavior-augmented item response models, and ships the synthetic-cohort
generator and evaluation harness used to validate the pipeline.
"""

from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    EncodingError,
    GenerationError,
    LeakageError,
    ParseError,
    ProcrepError,
    StratificationError,
    TrainingDivergedError,
    UndefinedMetricError,
    VocabularyMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DataError",
    "EncodingError",
    "GenerationError",
    "LeakageError",
    "ParseError",
    "ProcrepError",
    "StratificationError",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "VocabularyMismatchError",
    "__version__",
]
