from pydantic_settings import BaseSettings
from pydantic import Field, ValidationError
from pathlib import Path
from typing import Any, Dict, Optional, Union
import copy
import json
import logging
from src.models.enums import Preset
from src.models.schemas import ExperimentConfig, NetworkSpec
from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Caps torch intra-op threads; unset leaves the torch default
    threads: Optional[int] = Field(default=None, alias="DDNET_THREADS", ge=1)
    log_level: str = Field(default="INFO", alias="DDNET_LOG_LEVEL")
    ledger_url: str = Field(default="sqlite:///./runs/ledger.db", alias="DDNET_LEDGER_URL")
    run_root: str = Field(default="runs", alias="DDNET_RUN_ROOT")

    class Config:
        env_file = ".env"
        populate_by_name = True
        extra = "ignore"

settings = Settings()


def preset_defaults(preset: Union[Preset, str]) -> Dict[str, Any]:
    """Fully populated config dict for a named preset"""
    preset = Preset(preset)
    base = ExperimentConfig()
    if preset is Preset.PAPER_SHAPE:
        base = base.model_copy(update={
            "name": "ddnet-paper-shape",
            "prednet": NetworkSpec.reference_prednet(),
            "danet": NetworkSpec.reference_danet(),
        })
    return base.model_dump(mode="json")


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Merge ``override`` into a copy of ``base``; nested dicts merge, everything else replaces"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_seed(raw: Dict[str, Any], seed: int) -> Dict[str, Any]:
    """Derive every seed field from one override so a single flag reseeds the whole pipeline"""
    seeded = copy.deepcopy(raw)
    seeded.setdefault("world", {})["seed"] = seed
    seeded.setdefault("prednet_training", {})["seed"] = seed + 1
    seeded.setdefault("danet_training", {})["seed"] = seed + 2
    seeded.setdefault("evaluation", {})["seed"] = seed + 3
    return seeded


def _key_path(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def validate_experiment(raw: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigurationError(first["msg"], key_path=_key_path(first["loc"])) from e


def load_experiment_config(
    path: Union[str, Path],
    preset: Union[Preset, str] = Preset.DESK,
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """
    Resolve an experiment config from a JSON file.

    Args:
        path: JSON file; may override any subset of keys
        preset: defaults the file is merged onto
        seed: optional override applied to every seed field

    Returns:
        Validated ExperimentConfig
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}", key_path="--config")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}", key_path=str(path)) from e
    if not isinstance(raw, dict):
        raise ConfigurationError("top level must be a JSON object", key_path=str(path))

    merged = deep_merge(preset_defaults(preset), raw)
    if seed is not None:
        merged = apply_seed(merged, seed)
    config = validate_experiment(merged)
    logger.debug(f"Resolved config '{config.name}' from {path} (preset={Preset(preset).value}, seed={seed})")
    return config
