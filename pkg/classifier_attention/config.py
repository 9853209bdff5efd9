"""
Configuration: process settings from the environment and per-run settings
from plain-text key=value files.
"""
import logging
import os
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .exceptions import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)


class Settings:
    LOG_LEVEL = os.environ.get("CLASSIFIER_ATTENTION_LOG_LEVEL", "INFO").upper()
    LOG_FILE = os.environ.get("CLASSIFIER_ATTENTION_LOG_FILE") or None


# Full-size dataset values, selected with `preset = full`.
FULL_SIZE_DEFAULTS = {
    "n_classifiers": 16,
    "epochs": 40,
    "lr": 1e-4,
    "image_size": 448,
}

MAX_CLASSIFIERS = 64


def _int_tuple(value):
    if isinstance(value, str):
        try:
            return tuple(int(v) for v in value.split(",") if v.strip())
        except ValueError:
            raise ValueError(f"expected comma-separated integers, got '{value}'")
    return value


class RunConfig(BaseModel):
    """Every knob of a run. Defaults are sized for the synthetic benchmark."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: Literal["synthetic", "full"] = "synthetic"
    scales: int = Field(3, ge=1, le=8)
    n_classifiers: int = Field(4, ge=1, le=MAX_CLASSIFIERS)
    categories: int = Field(4, ge=2, le=1000)
    epochs: int = Field(15, ge=0, le=10000)
    lr: float = Field(1e-2, gt=0.0, le=10.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    warmup_epochs: int = Field(1, ge=0, le=10000)
    grad_clip: float = Field(5.0, ge=0.0, le=1e6)
    batch_size: int = Field(8, ge=1, le=4096)
    image_size: int = Field(64, ge=8, le=4096)
    margin_fraction: float = Field(0.1, ge=0.0, le=1.0)
    freeze_backbone: bool = False
    seed: int = Field(42, ge=0, le=2**32 - 1)
    otsu_bins: int = Field(256, ge=2, le=65536)
    aggregate_on: Literal["probs", "logits"] = "logits"
    loss_terms: Literal["both", "local", "object"] = "both"
    backbone_widths: Tuple[int, ...] = (16, 32, 64)
    train_per_class: int = Field(50, ge=0, le=100000)
    test_per_class: int = Field(50, ge=0, le=100000)
    patch_size: int = Field(16, ge=2, le=4096)
    clutter: float = Field(0.3, ge=0.0, le=1.0)
    nclf_list: Tuple[int, ...] = (1, 2, 4, 8, 16)

    @field_validator("backbone_widths", "nclf_list", mode="before")
    @classmethod
    def _parse_int_list(cls, value):
        return _int_tuple(value)

    @field_validator("backbone_widths", "nclf_list")
    @classmethod
    def _positive_list(cls, value):
        if not value or any(v < 1 for v in value):
            raise ValueError("needs at least one entry, all positive")
        return value

    @field_validator("nclf_list")
    @classmethod
    def _classifier_counts_in_range(cls, value):
        if any(v > MAX_CLASSIFIERS for v in value):
            raise ValueError(f"classifier counts must lie in 1..{MAX_CLASSIFIERS}")
        return value

    def to_text(self) -> str:
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        try:
            return RunConfig(**{**self.model_dump(), **changes})
        except ValidationError as e:
            raise _config_error(e)


def _config_error(e: ValidationError, lines: Optional[Dict[str, int]] = None) -> ConfigError:
    error = e.errors()[0]
    key = str(error["loc"][0]) if error["loc"] else None
    return ConfigError(error["msg"], key=key, line=(lines or {}).get(key) if key else None)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse key=value lines into a validated RunConfig.

    Args:
        text: Config file contents
        source: Name used in log messages

    Returns:
        RunConfig: The resolved configuration

    Raises:
        ConfigError: Naming the offending key and line
    """
    values: Dict[str, Union[str, int, float]] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in RunConfig.model_fields:
            raise ConfigError("unknown key", key=key, line=number)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=number)
        values[key] = value
        lines[key] = number

    if values.get("preset") == "full":
        for key, default in FULL_SIZE_DEFAULTS.items():
            values.setdefault(key, default)

    try:
        config = RunConfig(**values)
    except ValidationError as e:
        raise _config_error(e, lines)
    logger.debug("Parsed run config from %s", source)
    return config


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Read a config file, or return the defaults when ``path`` is None."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}")
    return parse_run_config(text, source=str(path))
