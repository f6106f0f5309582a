"""Pydantic schemas for payload/cluster security policies and sealed buffers."""
import enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

KEY_SIZE = 32


class SecurityMode(enum.IntEnum):
    NONE = 0
    AUTHENTICATE = 1
    ENCRYPT = 2
    ENCRYPT_AUTHENTICATE = 3

    @property
    def authenticated(self) -> bool:
        return self in (SecurityMode.AUTHENTICATE, SecurityMode.ENCRYPT_AUTHENTICATE)

    @property
    def encrypted(self) -> bool:
        return self in (SecurityMode.ENCRYPT, SecurityMode.ENCRYPT_AUTHENTICATE)


class SecurityPolicy(BaseModel):
    """Closed-shared section: how a payload (psec) or cluster (csec) is protected."""
    model_config = ConfigDict(frozen=True)

    mode: SecurityMode = SecurityMode.NONE
    key: Optional[bytes] = Field(None, repr=False, min_length=KEY_SIZE, max_length=KEY_SIZE)

    @model_validator(mode="after")
    def _key_iff_mode(self):
        if (self.mode == SecurityMode.NONE) != (self.key is None):
            raise ValueError("key must be present iff mode is not none")
        return self


NO_SECURITY = SecurityPolicy()


class SealedBuffer(BaseModel):
    """A payload as it travels: mode tag plus body."""
    model_config = ConfigDict(frozen=True)

    mode: SecurityMode
    body: bytes = b""

    def to_bytes(self) -> bytes:
        return bytes([self.mode]) + self.body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBuffer":
        from errors import ModeMismatchError
        if not raw:
            raise ModeMismatchError("sealed buffer is empty")
        try:
            mode = SecurityMode(raw[0])
        except ValueError as e:
            raise ModeMismatchError(f"unknown mode tag {raw[0]}") from e
        return cls(mode=mode, body=bytes(raw[1:]))
