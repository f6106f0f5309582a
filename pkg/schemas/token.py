"""Pydantic schemas for home locations and tokens."""
import enum
from functools import cached_property

from pydantic import BaseModel, ConfigDict, Field, field_validator

TOKEN_VERSION = 1
HASH_SIZE = 32
MAX_EXPIRE = 2**64 - 1


class HomeLocation(BaseModel):
    """Contact address of an MO server (also used for ditto-lists and peers)."""
    model_config = ConfigDict(frozen=True)

    host: str = Field(..., min_length=1, description="DNS name or numeric address")
    port: int = Field(..., ge=1, le=65535)

    @field_validator("host")
    @classmethod
    def _canonical_host(cls, value: str) -> str:
        host = value.strip().lower().rstrip(".")
        if not host:
            raise ValueError("host must be non-empty")
        if len(host.encode("utf-8")) > 255:
            raise ValueError("host longer than 255 bytes")
        return host

    @classmethod
    def parse(cls, address: str) -> "HomeLocation":
        """Parse 'host:port'."""
        host, _, port = address.rpartition(":")
        return cls(host=host, port=int(port))

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


class Ordering(enum.IntEnum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


class Token(BaseModel):
    """
    Systemwide unique, self-verifying identifier of a micro object.

    Ordered by copy-expire date, then hash bytes, then canonical encoding.
    """
    model_config = ConfigDict(frozen=True)

    version: int = Field(TOKEN_VERSION, ge=0, le=255)
    home: HomeLocation
    expire: int = Field(..., gt=0, le=MAX_EXPIRE, description="Copy-expire date, ms since epoch (UTC)")
    aux: int = Field(0, ge=0, le=0xFFFF, description="Creator-chosen tag hashed into the token")
    hash: bytes = Field(..., min_length=HASH_SIZE, max_length=HASH_SIZE)

    @cached_property
    def encoded(self) -> bytes:
        from services.tokens import token_encode
        return token_encode(self)

    @cached_property
    def sort_key(self) -> tuple[int, bytes, bytes]:
        return (self.expire, self.hash, self.encoded)

    @property
    def prefix(self) -> str:
        return self.hash[:4].hex()

    def hex(self) -> str:
        return self.encoded.hex()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Token):
            return NotImplemented
        return self.sort_key == other.sort_key

    def __lt__(self, other: "Token") -> bool:
        return self.sort_key < other.sort_key

    def __le__(self, other: "Token") -> bool:
        return self.sort_key <= other.sort_key

    def __gt__(self, other: "Token") -> bool:
        return self.sort_key > other.sort_key

    def __ge__(self, other: "Token") -> bool:
        return self.sort_key >= other.sort_key

    def __hash__(self) -> int:
        return hash(self.sort_key)

    def __str__(self) -> str:
        return f"{self.prefix}@{self.home}"
