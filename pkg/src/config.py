"""Application configuration."""

from pydantic_settings import BaseSettings
from functools import lru_cache
from typing import Optional


class Settings(BaseSettings):
    """Runtime settings loaded from environment."""

    # App Settings
    app_name: str = "Deep AIF Navigation"
    app_version: str = "1.0.0"
    debug: bool = False
    log_level: str = "INFO"

    # Worker Settings
    default_workers: int = 4  # concurrent evaluation episodes

    # Run Defaults
    default_out_dir: str = "runs/desk"
    default_seed: int = 0
    default_config: Optional[str] = None  # JSON ExperimentConfig used when --config is absent

    # Artifact Settings
    contact_sheet_columns: int = 10

    model_config = {
        "env_prefix": "AIF_NAV_",
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "extra": "ignore",
    }

    def resolved_log_level(self, verbose: bool = False) -> str:
        if verbose or self.debug:
            return "DEBUG"
        return self.log_level.upper()


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
