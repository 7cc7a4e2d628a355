from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional
import os
from functools import lru_cache

CONFIG_DIR_ENV = "EPHPUB_CONFIG_DIR"
SUPPORTED_KEY_BITS = (128, 134)


def _env_file() -> str:
    return os.path.join(os.getenv(CONFIG_DIR_ENV, "."), ".env")


class Settings(BaseSettings):
    # Environment
    ENVIRONMENT: str = "development"
    LOG_LEVEL: str = "WARNING"

    # DNS transport
    DNS_TIMEOUT_MS: int = 2000
    DNS_RETRIES: int = 2
    PARALLELISM: int = 64
    QUERY_TYPE: str = "A"
    # Tor or similar tunnel; recorded only, the UDP backend refuses to run with it
    PROXY_ADDRESS: Optional[str] = None

    # Protocol
    KEY_BITS: int = 128
    PREFETCH: bool = True
    PREFETCH_LABEL: str = "www"
    TTL_TOLERANCE: float = 0.10
    REPLAN_BUDGET: int = 8
    # cached prechecks on one resolver before it is swapped for a spare
    PRECHECK_HIT_LIMIT: int = 3
    CLOCK_SKEW_SECONDS: int = 60
    SKEW_MIN_GAP_SECONDS: int = 30

    # Dataset building
    PERSISTENCE_DELTA_FRACTION: float = 0.05
    PERSISTENCE_DELTA_MIN: int = 2
    TTL_MATCH_SLACK: int = 2
    HARVEST_ATTEMPT_FACTOR: int = 200

    # Analysis
    AVG_DNS_MESSAGE_BYTES: int = 180

    # Local API
    API_HOST: str = "127.0.0.1"
    API_PORT: int = 8053

    model_config = SettingsConfigDict(
        env_prefix="EPHPUB_",
        env_file=_env_file(),
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("KEY_BITS")
    @classmethod
    def _check_key_bits(cls, value: int) -> int:
        if value not in SUPPORTED_KEY_BITS:
            raise ValueError(f"KEY_BITS must be one of {SUPPORTED_KEY_BITS}, got {value}")
        return value

    @field_validator("TTL_TOLERANCE")
    @classmethod
    def _check_tolerance(cls, value: float) -> float:
        if not 0 <= value < 1:
            raise ValueError("TTL_TOLERANCE must be in [0, 1)")
        return value

    @field_validator("DNS_TIMEOUT_MS", "PARALLELISM")
    @classmethod
    def _check_positive(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @property
    def timeout_seconds(self) -> float:
        """Per-attempt DNS timeout in seconds"""
        return self.DNS_TIMEOUT_MS / 1000.0


@lru_cache()
def get_settings() -> Settings:
    return Settings()

settings = get_settings()
