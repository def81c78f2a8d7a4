import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import DataNotFoundError

load_dotenv()

_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    data_dir: Path = Path("data")
    output_dir: Path = Path("runs")
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="ROTUNROLL_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @field_validator("log_level", mode="before")
    def normalize_level(cls, v):
        if isinstance(v, str):
            v = v.strip().upper()
        if v not in _LEVELS:
            raise ValueError(f"log level must be one of {', '.join(_LEVELS)}")
        return v

    @property
    def logging_level(self) -> int:
        return getattr(logging, self.log_level)


@lru_cache
def get_settings() -> Settings:
    return Settings()


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """``key = value`` lines, ``#`` comments; keys come back with '-' normalized to '_'"""
    path = Path(path)
    if not path.is_file():
        raise DataNotFoundError(f"config file not found: {path}")
    values = dotenv_values(path)
    return {key.strip().replace("-", "_"): (value or "").strip() for key, value in values.items()}
