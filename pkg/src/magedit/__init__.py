"""Mask-based attention-adjusted guidance for localized diffusion image editing."""

from magedit.errors import (
    BackendError,
    ConfigError,
    ContractError,
    EmptyEditRegion,
    MagEditError,
    MissingTrajectory,
    NumericAbort,
    ScheduleError,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ConfigError",
    "ContractError",
    "EmptyEditRegion",
    "MagEditError",
    "MissingTrajectory",
    "NumericAbort",
    "ScheduleError",
    "__version__",
]
