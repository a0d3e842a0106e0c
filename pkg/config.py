from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache
from typing import Literal, Optional

class Settings(BaseSettings):
    APP_ENV: Literal["development", "production", "testing"] = "development"
    LOG_LEVEL: str = "INFO"

    # --- INFRASTRUCTURE ---
    SENTRY_DSN: Optional[str] = None

    # Worker pool size for chains / path blocks (None -> cpu count)
    ORBIT_LANGEVIN_THREADS: Optional[int] = None

    # --- NUMERICS ---
    FD_STEP: float = 1e-5
    PROJECTION_RANK_TOL: float = 1e-12
    DIVERGENCE_FACTOR: float = 1e6
    CONDITION_WARNING: float = 1e8

    # --- DIAGNOSTICS ---
    MIN_DIAGNOSTIC_SAMPLES: int = 1000
    BOOTSTRAP_REPLICATES: int = 200

    # --- PROCESSES / TORUS ---
    CIR_ACCURACY_FACTOR: float = 0.1
    QUADRATURE_NODES: int = 64
    QUADRATURE_TOL: float = 1e-8

    # --- GENERATION ---
    MASK_MAX_ATTEMPTS: int = 100

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

@lru_cache()
def get_settings() -> Settings:
    return Settings()
