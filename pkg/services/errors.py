"""Exception hierarchy shared by every service.

Each error carries the exit code the CLI reports for its category:
0 ok, 2 config error, 3 format error, 4 metric/model error, 5 I/O error.
"""
from pathlib import Path
from typing import Optional


class WMCodecError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(WMCodecError):
    exit_code = 2
    category = "config"


class MessageError(ConfigError):
    """Watermark digits that do not fit the model's base or length."""

    category = "message"


class FormatError(WMCodecError):
    exit_code = 3
    category = "format"

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(WMCodecError, ValueError):
    exit_code = 4
    category = "dimension"


class LookupIndexError(WMCodecError, IndexError):
    exit_code = 4
    category = "index"


class GraphError(WMCodecError):
    exit_code = 4
    category = "graph"


class MetricError(WMCodecError):
    exit_code = 4
    category = "metric"


class ModelError(WMCodecError):
    exit_code = 4
    category = "model"


class TrainingError(ModelError):
    category = "training"


class StorageError(WMCodecError):
    exit_code = 5
    category = "io"

    def __init__(self, message: str, path: Optional[Path] = None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = path
