"""Structured errors raised across hippofusion.

Every error carries a ``details`` mapping so the CLI can print it as JSON,
and an ``exit_code`` used by ``parse_and_dispatch``.
"""

from __future__ import annotations

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_INCOMPATIBLE = 5
EXIT_DATA = 6
EXIT_NUMERIC = 7
EXIT_EMPTY_REPORT = 8
EXIT_CANCELLED = 9


class HippoFusionError(Exception):
    """Base class for all structured errors."""

    exit_code = EXIT_UNEXPECTED

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    try:
        return value.item()
    except AttributeError:
        return str(value)


# Tensor and layer shape errors

class ShapeMismatchError(HippoFusionError, ValueError):
    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, shape_a: Any = None, shape_b: Any = None, **details: Any):
        super().__init__(message, shape_a=shape_a, shape_b=shape_b, **details)


class AxisError(HippoFusionError, ValueError):
    exit_code = EXIT_NUMERIC


class WindowOutOfBoundsError(HippoFusionError, ValueError):
    exit_code = EXIT_NUMERIC


class ChannelMismatchError(ShapeMismatchError):
    pass


class DimensionMismatchError(ShapeMismatchError):
    pass


class BatchSizeError(HippoFusionError, ValueError):
    exit_code = EXIT_NUMERIC


class DropoutRateError(HippoFusionError, ValueError):
    exit_code = EXIT_CONFIG


class PoolingExtentError(HippoFusionError, ValueError):
    exit_code = EXIT_NUMERIC


# Configuration

class ConfigError(HippoFusionError, ValueError):
    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key_path: Optional[str] = None, **details: Any):
        super().__init__(message, key_path=key_path, **details)


class IncompatibleOptionsError(HippoFusionError, ValueError):
    exit_code = EXIT_INCOMPATIBLE


class MissingFileError(HippoFusionError, FileNotFoundError):
    exit_code = EXIT_MISSING_FILE


# Data

class NiftiFormatError(HippoFusionError, ValueError):
    exit_code = EXIT_DATA

    def __init__(self, message: str, field: Optional[str] = None, **details: Any):
        super().__init__(message, field=field, **details)


class ROIOutOfBoundsError(WindowOutOfBoundsError):
    exit_code = EXIT_DATA


class LabelError(HippoFusionError, ValueError):
    exit_code = EXIT_DATA


class ManifestError(HippoFusionError, ValueError):
    exit_code = EXIT_DATA


# Optimization

class OptimizerError(HippoFusionError, ValueError):
    exit_code = EXIT_NUMERIC


class AccumulatorOverflowError(OptimizerError):
    pass


# Metrics and reporting

class MetricError(HippoFusionError, ValueError):
    exit_code = EXIT_NUMERIC


class SeriesTooShortError(MetricError):
    pass


class CheckpointError(HippoFusionError, ValueError):
    exit_code = EXIT_DATA


class ReportFormatError(HippoFusionError, ValueError):
    exit_code = EXIT_DATA

    def __init__(self, message: str, line: Optional[int] = None, **details: Any):
        super().__init__(message, line=line, **details)


class EmptyLogError(HippoFusionError, ValueError):
    exit_code = EXIT_EMPTY_REPORT


class TrainingCancelled(HippoFusionError):
    exit_code = EXIT_CANCELLED


class BlurSigmaError(HippoFusionError, ValueError):
    exit_code = EXIT_CONFIG
