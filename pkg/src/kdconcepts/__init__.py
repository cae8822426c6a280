"""Quantify visual concepts in teacher, distilled-student and baseline networks."""

from kdconcepts.errors import (
    EstimatorError,
    IntegrityError,
    LayerLookupError,
    NumericError,
    SchemaVersionError,
    TrainingError,
    UndefinedMetricError,
    ValidationError,
)

__version__ = "0.1.0"

LAYERS = ("FC1", "FC2", "FC3")

__all__ = [
    "LAYERS",
    "EstimatorError",
    "IntegrityError",
    "LayerLookupError",
    "NumericError",
    "SchemaVersionError",
    "TrainingError",
    "UndefinedMetricError",
    "ValidationError",
]
