"""Robust top-k ranking explanations: training, attacks, thickness and metrics."""

__version__ = "0.1.0"

from rankshield.errors import (AttackError, CapabilityError, EstimationError,  # noqa: E402
                               IngestionError, NumericError, RankShieldError,
                               ShapeError, TrainingError, UsageError)
from rankshield.model import (Activation, DenseNet, QuadraticModel, linear_model,  # noqa: E402
                              quadratic_test_model)

__all__ = [
    "__version__", "Activation", "DenseNet", "QuadraticModel", "linear_model",
    "quadratic_test_model", "RankShieldError", "ShapeError", "UsageError",
    "CapabilityError", "TrainingError", "EstimationError", "AttackError",
    "NumericError", "IngestionError",
]
