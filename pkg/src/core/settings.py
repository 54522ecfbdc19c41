from pydantic_settings import BaseSettings
from pydantic import Field, field_validator
from typing import List, Literal, Optional, cast, get_args
import os
import re

LogLevel = Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
VALID_LOG_LEVELS: set[LogLevel] = set(get_args(LogLevel))

URL_REGEX = re.compile(r"^https?://")


class Settings(BaseSettings):
    # Application environment
    app_env: str = Field(
        default_factory=lambda: os.getenv("APP_ENV", "development"),
        description="Application environment (development, production, etc.)",
    )

    # CORS configuration for the HTTP service
    cors_allow_urls: str = Field(
        default_factory=lambda: os.getenv("CORS_ALLOW_URLS", ""),
        description="Comma-separated list of allowed CORS origins",
    )

    # Logging configuration
    log_level: LogLevel = Field(
        default_factory=lambda: cast(LogLevel, os.getenv("LOG_LEVEL", "INFO")),
        description=f"Logging level ({', '.join(sorted(VALID_LOG_LEVELS))})",
    )

    @field_validator("log_level", mode="before")
    @classmethod
    def validate_log_level(cls, v: str) -> LogLevel:
        """Validate that log_level is one of the allowed values."""
        upper_v = str(v).upper()
        if upper_v not in VALID_LOG_LEVELS:
            raise ValueError(
                f"Invalid log_level: {v}. "
                f"Must be one of: {', '.join(sorted(VALID_LOG_LEVELS))}"
            )
        return cast(LogLevel, upper_v)

    # Parallelism
    workers: int = Field(
        default_factory=lambda: int(os.getenv("HYBRIDAM_WORKERS", "1")),
        description="Default number of workers for per-utterance evaluation",
    )

    @field_validator("workers")
    @classmethod
    def validate_workers(cls, v: int) -> int:
        """Validate that at least one worker is configured."""
        if v < 1:
            raise ValueError(f"HYBRIDAM_WORKERS must be >= 1, got {v}")
        return v

    # Artifacts served by the HTTP decoding endpoint
    decode_graph: Optional[str] = Field(
        default_factory=lambda: os.getenv("HYBRIDAM_DECODE_GRAPH") or None,
        description="Path of the decode graph served by /decode",
    )
    inventory: Optional[str] = Field(
        default_factory=lambda: os.getenv("HYBRIDAM_INVENTORY") or None,
        description="Path of the unit inventory TSV matching the decode graph",
    )
    checkpoint: Optional[str] = Field(
        default_factory=lambda: os.getenv("HYBRIDAM_CHECKPOINT") or None,
        description="Path of the model checkpoint whose priors/kappa drive decoding",
    )

    @property
    def cors_allow_urls_list(self) -> List[str]:
        """Allowed origins; empty when CORS is not configured."""
        urls = [url.strip() for url in self.cors_allow_urls.split(",") if url.strip()]
        for url in urls:
            if not URL_REGEX.match(url):
                raise ValueError(
                    f"Invalid CORS origin: {url}. Must be a valid http(s) URL."
                )
        return urls

    @property
    def is_development(self) -> bool:
        """Check if the application is running in development mode"""
        return self.app_env.lower() in ["development", "dev"]

    @property
    def is_production(self) -> bool:
        """Check if the application is running in production mode"""
        return self.app_env.lower() in ["production", "prod"]

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"


settings = Settings()
