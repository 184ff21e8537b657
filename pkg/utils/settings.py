"""
Process Settings

Environment-driven settings shared by the CLI and the certification
service. Values are read once per process from ``IBPCERT_*`` variables.
"""

from functools import lru_cache
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime settings for the toolkit"""

    model_config = SettingsConfigDict(env_prefix="IBPCERT_", extra="ignore")

    log_level: str = Field(default="INFO", description="Root log level")
    log_json: bool = Field(default=False, description="Emit JSON log records")
    num_threads: int = Field(
        default=1,
        ge=1,
        description="Intra-op thread count; pinned for bitwise reproducibility",
    )
    default_out_dir: str = Field(default="runs", description="Output directory when --out is omitted")
    checkpoint_root: Optional[str] = Field(
        default=None,
        description="Directory the certification service may load checkpoints from",
    )
    service_port: int = Field(default=8000, description="Port for the certification service")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
