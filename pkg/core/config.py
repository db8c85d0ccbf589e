"""
Configuration settings for the generative MIL toolkit
"""

import logging
import os
import sys
from typing import Optional, Tuple

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings, overridable through GENMIL_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="GENMIL_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )

    # EM settings
    MAX_EM_ITERATIONS: int = Field(default=100, ge=1)
    DEFAULT_MODEL: str = Field(default="bif")
    DEFAULT_DENSITY: str = Field(default="gauss-diag")
    DEFAULT_CLASSIFIER: str = Field(default="lr")
    FIB_FEATURE_DENSITY: str = Field(default="kde")

    # Classifier settings
    KNN_NEIGHBOURS: int = Field(default=7, ge=1)
    KNN_SMOOTHING: float = Field(default=1.0, gt=0.0)
    LR_RIDGE: float = Field(default=1e-4, ge=0.0)
    LR_TOLERANCE: float = Field(default=1e-6, gt=0.0)
    LR_MAX_ITERATIONS: int = Field(default=10_000, ge=1)
    DD_MAX_STARTS: int = Field(default=25, ge=1)
    DD_MAX_ITERATIONS: int = Field(default=500, ge=1)

    # Evaluation settings
    PCA_VARIANCE_THRESHOLD: float = Field(default=0.90, gt=0.0, le=1.0)
    EVAL_WORKERS: int = Field(default=1, ge=1)
    SHOW_PROGRESS: bool = Field(default=True)

    # Synthetic data settings
    SYNTHETIC_BAG_SIZE_MIN: int = Field(default=15, ge=1)
    SYNTHETIC_BAG_SIZE_MAX: int = Field(default=25, ge=1)
    SYNTHETIC_BAG_COUNT: int = Field(default=80, ge=1)

    # Logging settings
    LOG_LEVEL: str = Field(default="INFO")
    LOG_FILE: Optional[str] = Field(default=None)
    LOG_FORMAT: str = Field(default="%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    @property
    def synthetic_bag_size_range(self) -> Tuple[int, int]:
        return self.SYNTHETIC_BAG_SIZE_MIN, self.SYNTHETIC_BAG_SIZE_MAX


# Create global settings instance
settings = Settings()


def configure_logging(level: Optional[str] = None) -> None:
    """Install stderr (and optional file) handlers on the root logger"""
    handlers: list = []

    if sys.stderr.isatty():
        from rich.logging import RichHandler

        handlers.append(RichHandler(show_path=False, rich_tracebacks=False))
        fmt = "%(message)s"
    else:
        handlers.append(logging.StreamHandler(sys.stderr))
        fmt = settings.LOG_FORMAT

    if settings.LOG_FILE:
        log_dir = os.path.dirname(settings.LOG_FILE)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(settings.LOG_FILE)
        file_handler.setFormatter(logging.Formatter(settings.LOG_FORMAT))
        handlers.append(file_handler)

    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format=fmt,
        handlers=handlers,
        force=True,
    )
