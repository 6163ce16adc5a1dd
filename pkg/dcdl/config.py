from functools import lru_cache
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="DCDL_", env_file=".env", extra="ignore")

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(default="INFO")

    sinkhorn_epsilon: float = Field(default=2.5e-3, gt=0.0)
    sinkhorn_tolerance: float = Field(default=1e-6, gt=0.0)
    sinkhorn_max_iterations: int = Field(default=10_000, ge=1)
    oracle_max_cells: int = Field(default=400, ge=1)

    kernel_sigma: float = Field(default=0.05, gt=0.0)

    selftest_seed: int = Field(default=0)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
