import tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    api_key: str | None = None
    device: str = "cpu"
    checkpoint_dir: Path = Path("checkpoints")
    checkpoint_filename: str = "codec.pt"
    checkpoint_repo_id: str | None = None
    max_upload_mb: int = 64
    workers: int = 1
    log_level: str = "INFO"


@lru_cache
def get_settings() -> Settings:
    return Settings()


class UnknownConfigKeyError(ValueError):
    pass


def read_config_file(path: Path) -> dict[str, Any]:
    with path.open("rb") as fh:
        return tomllib.load(fh)


def _overlay(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = merged.get(key)
            merged[key] = _overlay(current if isinstance(current, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def merge_run_config[M: BaseModel](
    model: type[M],
    file_values: dict[str, Any],
    flag_values: dict[str, Any],
) -> M:
    """Validate file values overridden by flags; flags set to None are ignored.

    Nested tables merge key by key, so a flag only replaces the value it names.
    """
    merged = _overlay(file_values, flag_values)
    try:
        return model.model_validate(merged)
    except ValidationError as exc:
        extra = [e for e in exc.errors() if e["type"] == "extra_forbidden"]
        if extra:
            key = ".".join(str(part) for part in extra[0]["loc"])
            raise UnknownConfigKeyError(f"Unknown config key '{key}'") from exc
        raise
