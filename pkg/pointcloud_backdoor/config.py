"""Loading experiment configurations from TOML.

Every key is optional; unknown keys are rejected. Environment variables may
override seeds and the output directory only:

- ``POINTCLOUD_BACKDOOR_SEED``: base seed, stage seeds become base + offset
- ``POINTCLOUD_BACKDOOR_OUTPUT_DIR``: run directory
"""

import logging
import os
from pathlib import Path
from typing import Any, Mapping, Optional

import toml
from pydantic import ValidationError

from .errors import ConfigurationError
from .models import ExperimentConfig, StageSeeds

logger = logging.getLogger(__name__)

SEED_ENV = "POINTCLOUD_BACKDOOR_SEED"
OUTPUT_DIR_ENV = "POINTCLOUD_BACKDOOR_OUTPUT_DIR"


def _field_path(loc: tuple[Any, ...]) -> str:
    return ".".join(str(part) for part in loc)


def validate_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a raw mapping, reporting the first failure by dotted path."""
    try:
        return ExperimentConfig.model_validate(dict(data))
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigurationError(first["msg"], _field_path(tuple(first["loc"]))) from e


def _apply_env_overrides(data: dict[str, Any]) -> dict[str, Any]:
    seed = os.getenv(SEED_ENV)
    if seed:
        try:
            base = int(seed)
        except ValueError as e:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got '{seed}'", "seeds") from e
        data["seeds"] = StageSeeds.from_base(base).model_dump()
        logger.info("Stage seeds derived from %s=%d", SEED_ENV, base)

    output_dir = os.getenv(OUTPUT_DIR_ENV)
    if output_dir:
        data["output_dir"] = output_dir
    return data


def load_config(path: Optional[Path] = None) -> ExperimentConfig:
    """Read a TOML config (or the defaults when ``path`` is None)."""
    data: dict[str, Any] = {}
    if path is not None:
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = toml.load(path)
        except toml.TomlDecodeError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}") from e
    return validate_config(_apply_env_overrides(data))


def set_dotted(data: dict[str, Any], dotted: str, value: Any) -> None:
    """Assign ``value`` at ``dotted`` inside nested dicts, creating levels."""
    *parents, leaf = dotted.split(".")
    node = data
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def with_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """A re-validated copy of ``config`` with dotted-path overrides applied."""
    data = config.model_dump(mode="json", by_alias=True)
    for dotted, value in overrides.items():
        set_dotted(data, dotted, value)
    return validate_config(data)


def dump_config(config: ExperimentConfig) -> str:
    """Serialise a config back to TOML."""
    return toml.dumps(config.model_dump(mode="json", by_alias=True, exclude_none=True))


__all__ = ["dump_config", "load_config", "set_dotted", "validate_config", "with_overrides"]
