from typing import List
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field


class Settings(BaseSettings):

    model_config = SettingsConfigDict(
        env_file='.env',
        env_file_encoding='utf-8'
    )

    OUTPUT_DIR: str = Field(
        default="runs",
        description="Default directory for run artifacts"
    )
    LOG_LEVEL: str = Field(
        default="INFO",
        description="Root logging level"
    )

    DEFAULT_SEED: int = 20120827
    DEFAULT_K: int = 10

    # candidate bound and truncated iterations for the walk recommenders
    DEFAULT_MU: int = 6000
    DEFAULT_TAU: int = 15

    DEFAULT_TOPICS: int = 20
    DEFAULT_BETA: float = 0.1
    DEFAULT_SWEEPS: int = 200

    DEFAULT_DAMPING: float = 0.5
    PPR_TOLERANCE: float = 1e-10
    PPR_MAX_ITERATIONS: int = 1000

    DEFAULT_R_PERCENT: float = 0.2
    DEFAULT_N_CASES: int = 4000
    DEFAULT_N_DECOYS: int = 1000
    DEFAULT_EVAL_USERS: int = 2000

    RECALL_CUTOFFS: List[int] = [1, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50]
    POPULARITY_CUTOFFS: List[int] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]

    DENSE_SOLVER_LIMIT: int = 3000
    MAX_WORKERS: int = 4


settings = Settings()
