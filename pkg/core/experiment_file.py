"""
Experiment config files
קובץ הגדרות בתחביר dotenv: שורה אחת לכל `section.field = value`
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from core.errors import ConfigError, MissingArtifactError
from core.models import ExperimentConfig

logger = logging.getLogger(__name__)

_NULLS = {"none", "null", ""}


def expand_dotted(flat: Dict[str, Optional[str]]) -> Dict[str, Any]:
    """{"a.b.c": v} -> {"a": {"b": {"c": v}}}"""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = [part.strip() for part in key.split(".")]
        if not all(parts):
            raise ConfigError(f"malformed config key {key!r}")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key {key!r} collides with a scalar at {part!r}")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"config key {key!r} collides with a section")
        node[parts[-1]] = None if value is None or value.strip().lower() in _NULLS else value.strip()
    return nested


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """`--set key=value` -> {key: value}"""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def load_experiment_config(
    path: Union[str, Path, None] = None,
    overrides: Optional[Dict[str, str]] = None,
) -> ExperimentConfig:
    """
    טעינת ExperimentConfig: קובץ (אם יש), ואחריו דריסות משורת הפקודה.
    מפתח לא מוכר נדחה.
    """
    flat: Dict[str, Optional[str]] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config file not found: {path}")
        flat.update(dotenv_values(path))
        logger.info(f"Loaded experiment config {path} ({len(flat)} keys)")
    flat.update(overrides or {})
    try:
        return ExperimentConfig.model_validate(expand_dotted(flat))
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}") from e


def dump_experiment_config(experiment: ExperimentConfig) -> str:
    """The inverse of load_experiment_config, one dotted key per line."""
    lines = []

    def walk(prefix: str, value: Any) -> None:
        if isinstance(value, dict) and not prefix.endswith("weights"):
            for key in sorted(value):
                walk(f"{prefix}.{key}" if prefix else key, value[key])
            return
        if isinstance(value, dict):
            text = ",".join(f"{k}:{v}" for k, v in value.items())
        elif isinstance(value, (list, tuple)):
            text = ",".join(str(v) for v in value)
        elif value is None:
            text = "none"
        else:
            text = str(value)
        lines.append(f"{prefix} = {text}")

    walk("", experiment.model_dump(mode="json"))
    return "\n".join(lines) + "\n"
