"""Multi-group varying-effect VAR network estimation with variational inference."""

from .model import (
    CoefficientIndex,
    ConfigError,
    DataError,
    LaggedDesign,
    ModelConfig,
    NumericalError,
    SubjectDataset,
    VevarError,
    build_lagged_design,
    flat_index,
    group_function_eval,
    subject_loglik,
    unflatten,
    validate_subjects,
)

__version__ = "0.1.0"

__all__ = [
    "CoefficientIndex",
    "ConfigError",
    "DataError",
    "LaggedDesign",
    "ModelConfig",
    "NumericalError",
    "SubjectDataset",
    "VevarError",
    "build_lagged_design",
    "flat_index",
    "group_function_eval",
    "subject_loglik",
    "unflatten",
    "validate_subjects",
    "__version__",
]
