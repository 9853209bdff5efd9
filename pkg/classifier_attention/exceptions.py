"""Exception hierarchy shared by every module.

Each exception carries a short machine-parsable ``category`` which the
command-line entry point prints verbatim.
"""
from typing import Any, Dict, Optional


class ClassifierAttentionError(Exception):
    category = "error"


class RejectedInputError(ClassifierAttentionError, ValueError):
    category = "rejected-input"


class FormatError(ClassifierAttentionError):
    category = "format"

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class FeatureMapFormatError(FormatError):
    category = "feature-map-format"


class ImageFormatError(FormatError):
    category = "image-format"


class ManifestError(FormatError):
    category = "manifest-format"

    def __init__(self, message: str, line: int, field: Optional[str] = None):
        super().__init__(f"line {line}: {message}", field=field)
        self.line = line


class CheckpointFormatError(FormatError):
    category = "checkpoint-format"


class ConfigError(ClassifierAttentionError):
    category = "config"

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class TrainingDivergedError(ClassifierAttentionError):
    category = "training-diverged"

    def __init__(self, message: str, snapshot: Dict[str, Any]):
        super().__init__(f"{message} ({', '.join(f'{k}={v}' for k, v in snapshot.items())})")
        self.snapshot = snapshot
