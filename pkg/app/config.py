import logging
from functools import lru_cache
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime overrides read from the environment (PATHSPACE_SEED, PATHSPACE_OUT_DIR, ...)"""

    model_config = SettingsConfigDict(env_prefix="PATHSPACE_")

    seed: Optional[int] = None
    out_dir: Optional[str] = None
    log_level: str = "INFO"


@lru_cache
def get_settings() -> Settings:
    return Settings()


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once for scripts and the HTTP app"""
    level = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
