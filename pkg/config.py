"""
Server configuration: validated at startup via Pydantic.

`ServerConfig` is a plain model so a simulated network can build one per
server without reading the environment. `Settings` extends it with the
environment / key=value file sources used by the real process.
"""
import os
from typing import Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import BadConfigError

DAY_MS = 24 * 3600 * 1000


class ServerConfig(BaseModel):
    """Per-server knobs of an MO server and its lib-server clients."""

    # ── Listeners ────────────────────────────────────────────────────────
    listen: str = Field(
        default="127.0.0.1:4710",
        description="Remote channel listen address (host:port)",
    )
    local_listen: str = Field(
        default="127.0.0.1:4711",
        description="Local (trusted) channel listen address (host:port)",
    )
    advertise: Optional[str] = Field(
        default=None,
        description="Address peers use to reach us and that homes adopted objects; defaults to listen",
    )
    local_secret: str = Field(
        default="",
        description="Shared secret authenticating local-channel requests",
    )

    # ── Store / cache ────────────────────────────────────────────────────
    cache_capacity: int = Field(default=1024, ge=1, description="Cached micro objects (LRU)")
    grace_period_ms: int = Field(default=30_000, ge=0, description="T*: retention past expiry")
    clock_skew_bound_ms: int = Field(default=10_000, ge=0, description="T: assumed clock skew bound")
    max_sustain_ms: int = Field(default=30 * DAY_MS, ge=1, description="Longest SUSTAIN extension")
    store_path: Optional[str] = Field(default=None, description="SQLite store file; memory only when unset")

    # ── Hot spots ────────────────────────────────────────────────────────
    busy_threshold: int = Field(default=16, ge=0, description="In-flight identical fetches before BUSY; 0 disables")
    busy_window_ms: int = Field(default=0, ge=0, description="Simulated service time a fetch stays in flight")
    ditto_max: int = Field(default=8, ge=0, description="Addresses carried on a ditto-list")

    # ── Replication ──────────────────────────────────────────────────────
    flood_fanout: Optional[int] = Field(default=None, ge=1, description="Peers per flood step; unlimited when unset")
    flood_interval_ms: int = Field(default=1000, ge=0, description="Anti-stale flood timer; 0 disables")
    flood_delay_ms: int = Field(default=0, ge=0, description="Delay of event-driven flood steps")
    fetch_retries: int = Field(default=3, ge=1, description="Attempts against an unreachable home")
    retry_delay_ms: int = Field(default=100, ge=0, description="First retry delay, doubled per attempt")

    # ── Payloads / transport ─────────────────────────────────────────────
    max_payload_size: int = Field(default=65536, ge=64, description="Largest sealed payload in bytes")
    transport_timeout_s: float = Field(default=5.0, gt=0, description="Stream request timeout")

    # ── Lib-server / DAO ─────────────────────────────────────────────────
    poll_interval_ms: int = Field(default=100, ge=1, description="Lib-server cluster poll period")
    default_lifetime_ms: int = Field(default=7 * DAY_MS, ge=1, description="Lifetime of new DAO objects")

    # ── Process ──────────────────────────────────────────────────────────
    status_port: Optional[int] = Field(default=None, ge=1, le=65535, description="HTTP status API port")
    log_level: str = "INFO"

    @field_validator("listen", "local_listen", "advertise")
    @classmethod
    def _check_address(cls, value: Optional[str]) -> Optional[str]:
        if value is None:
            return value
        host, sep, port = value.rpartition(":")
        if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 65535:
            raise ValueError(f"address must be host:port, got {value!r}")
        return value

    @field_validator("advertise")
    @classmethod
    def _check_advertised_port(cls, value: Optional[str]) -> Optional[str]:
        # Tokens carry this address; port 0 only makes sense for a listener.
        if value is not None and int(value.rpartition(":")[2]) == 0:
            raise ValueError(f"advertised address needs a port of at least 1, got {value!r}")
        return value

    @model_validator(mode="after")
    def _check_grace(self):
        # T* > T
        if self.grace_period_ms <= self.clock_skew_bound_ms:
            raise ValueError(
                f"grace_period_ms ({self.grace_period_ms}) must exceed "
                f"clock_skew_bound_ms ({self.clock_skew_bound_ms})"
            )
        return self

    @property
    def advertised(self) -> str:
        return self.advertise or self.listen


class Settings(BaseSettings, ServerConfig):
    """All configuration from MO_* environment variables or a key=value file."""

    model_config = SettingsConfigDict(
        env_prefix="MO_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


def load_settings(config_path: Optional[str] = None, **overrides) -> Settings:
    """
    Resolve config: explicit path, then $MO_CONFIG, then ./.env.
    Keyword overrides (CLI flags) win over file and environment values.
    """
    path = config_path or os.environ.get("MO_CONFIG") or ".env"
    if config_path and not os.path.exists(config_path):
        raise BadConfigError(f"config file {config_path} not found")
    try:
        return Settings(
            _env_file=path if os.path.exists(path) else None,
            **{k: v for k, v in overrides.items() if v is not None},
        )
    except ValidationError as e:
        raise BadConfigError(str(e)) from e


def server_config(**values) -> ServerConfig:
    """Build a ServerConfig, turning validation failures into BadConfigError."""
    try:
        return ServerConfig(**values)
    except ValidationError as e:
        raise BadConfigError(str(e)) from e
