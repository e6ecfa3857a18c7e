import os
from typing import Literal, Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # App metadata
    APP_NAME: str = "mfd-efficacy"
    APP_ENV: Literal["dev", "prod"] = "dev"
    APP_VERSION: str = "0.1.0"

    # Reproducibility overrides (echoed into run manifests)
    MFD_SEED: int | None = None
    MFD_JOBS: int | None = None

    # Default output directory for CLI commands
    MFD_OUTPUT_DIR: str = "out"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_SERIALIZE: bool = False

    class Config:
        env_file = None  # settings come from the process environment only


_settings: Optional[Settings] = None
_settings_sig: tuple | None = None


def _env_signature() -> tuple:
    keys = (
        "APP_NAME",
        "APP_ENV",
        "APP_VERSION",
        "MFD_SEED",
        "MFD_JOBS",
        "MFD_OUTPUT_DIR",
        "LOG_LEVEL",
        "LOG_SERIALIZE",
    )
    return tuple((k, os.environ.get(k)) for k in keys)


def get_settings() -> Settings:
    global _settings, _settings_sig
    sig = _env_signature()
    if _settings is None or _settings_sig != sig:
        _settings = Settings()  # type: ignore[call-arg]
        _settings_sig = sig
    return _settings
