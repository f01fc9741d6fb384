"""
csc4net Core Configuration
"""

import os
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Runtime settings, read from CSC4NET_* environment variables or a .env file
    """

    # Basic configuration
    PROJECT_NAME: str = "csc4net"
    VERSION: str = "1.0.0"
    # forces DEBUG logging unless a level is passed explicitly
    DEBUG: bool = False

    # Logging configuration
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False

    # Compute configuration
    THREADS: Optional[int] = None
    DEFAULT_SEED: int = 0

    # Numerical conventions
    PSNR_CAP_DB: float = 99.0
    FLOAT_DTYPE_ON_DISK: str = "f64"

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level: {v}")
        return level

    @field_validator("THREADS")
    @classmethod
    def validate_threads(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 1:
            raise ValueError("THREADS must be at least 1")
        return v

    @field_validator("FLOAT_DTYPE_ON_DISK")
    @classmethod
    def validate_dtype(cls, v: str) -> str:
        if v not in {"f32", "f64"}:
            raise ValueError("FLOAT_DTYPE_ON_DISK must be f32 or f64")
        return v

    def worker_count(self) -> int:
        """Threads to use: the configured cap, else every available core"""
        return self.THREADS or os.cpu_count() or 1

    model_config = SettingsConfigDict(
        env_prefix="CSC4NET_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


# Global settings instance
settings = Settings()
