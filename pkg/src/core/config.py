"""Application configuration"""

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    # Output settings
    OUTPUT_ROOT: str = "runs"

    # Sweep settings
    SWEEP_WORKERS: int = Field(default=1, ge=1)

    # TV solver defaults
    SOLVER_MAX_ITER: int = Field(default=10000, ge=1)
    SOLVER_PRIMAL_TOL: float = Field(default=1e-6, gt=0)
    SOLVER_DUAL_TOL: float = Field(default=1e-6, gt=0)
    SOLVER_RHO: float = Field(default=1.0, gt=0)
    SOLVER_ABS_TOL: float = Field(default=1e-9, gt=0)
    SOLVER_RELAXATION: float = Field(default=1.6, gt=0, lt=2)

    # Linear algebra
    CG_FALLBACK_TOL: float = Field(default=1e-10, gt=0)
    CG_MAX_ITER: int = Field(default=20000, ge=1)

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = "elastoinverse.log"
    LOG_DIR: str = "logs"


settings = Settings()
