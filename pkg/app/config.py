"""
Configuration
=============
All tunables of the projection engine in one pydantic model.

Precedence, lowest to highest:
1. Built-in defaults
2. Environment variables prefixed ``CFF_`` (a local ``.env`` file is loaded)
3. A ``key=value`` config file passed with ``--config``
4. Explicit command-line flags

Keys are ``section.field`` (``grid.cell_size=0.6``, ``depth.max_gap=10``) or a
top-level field (``stride``, ``threshold``, ``seed``, ``num_classes``,
``log_level``). In the environment the dot becomes a double underscore:
``CFF_GRID__CELL_SIZE=0.6``. Sequence values are comma separated.
"""

import logging
import os
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from app.exceptions import ConfigError, IoError
from app.services.augment_service import AugmentationRanges
from app.services.bev_service import BevGridConfig
from app.services.depth_service import DepthFillConfig
from app.services.geometry_service import CameraRigConfig
from app.services.scene_service import LidarConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "CFF_"


class Settings(BaseModel):
    """Engine-wide settings."""

    grid: BevGridConfig = Field(default_factory=BevGridConfig)
    depth: DepthFillConfig = Field(default_factory=DepthFillConfig)
    augment: AugmentationRanges = Field(default_factory=AugmentationRanges)
    lidar: LidarConfig = Field(default_factory=LidarConfig)
    rig: CameraRigConfig = Field(default_factory=CameraRigConfig)

    stride: int = Field(default=4, ge=1)
    threshold: float = Field(default=0.1, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)
    num_classes: int = Field(default=3, ge=1)
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, level: str) -> str:
        if not isinstance(logging.getLevelName(level.upper()), int):
            raise ValueError(f"unknown log level '{level}'")
        return level.upper()


SECTIONS: Dict[str, type] = {
    name: field.annotation
    for name, field in Settings.model_fields.items()
    if isinstance(field.annotation, type) and issubclass(field.annotation, BaseModel)
}
TOP_LEVEL = [name for name in Settings.model_fields if name not in SECTIONS]


def _is_sequence(annotation: Any) -> bool:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        return any(_is_sequence(arg) for arg in typing.get_args(annotation))
    return origin in (list, tuple)


def _coerce(model: type, field: str, raw: Any) -> Any:
    """Split comma-separated strings for sequence-typed fields."""
    if isinstance(raw, str) and _is_sequence(model.model_fields[field].annotation):
        return [part.strip() for part in raw.split(",") if part.strip()]
    return raw


def _apply(tree: Dict[str, Any], key: str, raw: Any, source: str) -> None:
    """Insert one ``section.field`` or top-level value into the nested dict."""
    key = key.strip().lower()
    if "." in key:
        section, field = key.split(".", 1)
        model = SECTIONS.get(section)
        if model is None or field not in model.model_fields:
            raise ConfigError(f"{source}: unknown configuration key '{key}'")
        tree.setdefault(section, {})[field] = _coerce(model, field, raw)
    else:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{source}: unknown configuration key '{key}'")
        tree[key] = raw


def environment_values(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """``CFF_*`` variables as ``section.field`` keys."""
    environ = os.environ if environ is None else environ
    values = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            values[name[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """
    Parse a ``key=value`` config file.

    Raises:
        IoError: If the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise IoError(f"config file not found: {path}")
    return dotenv_values(path)


def load_settings(
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
    use_dotenv: bool = True,
) -> Settings:
    """
    Build Settings from defaults, environment, config file and overrides.

    Args:
        config_path: Optional ``key=value`` file
        overrides: Command-line values keyed like the config file; None
            values are ignored
        environ: Environment mapping (``os.environ`` when None)
        use_dotenv: Load a ``.env`` file into the process environment first

    Returns:
        Validated Settings

    Raises:
        ConfigError: On unknown keys or invalid values
    """
    if use_dotenv and environ is None:
        load_dotenv()

    tree: Dict[str, Any] = {}
    for key, value in environment_values(environ).items():
        _apply(tree, key, value, "environment")

    if config_path is not None:
        for key, value in read_config_file(config_path).items():
            if value is None:
                raise ConfigError(f"{config_path}: key '{key}' has no value")
            _apply(tree, key, value, str(config_path))

    for key, value in (overrides or {}).items():
        if value is not None:
            _apply(tree, key, value, "command line")

    try:
        settings = Settings.model_validate(tree)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid configuration value for '{location}': {first['msg']}") from exc

    logger.debug("Settings loaded: %s", settings.model_dump())
    return settings
