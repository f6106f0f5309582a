"""Pydantic schemas for cluster digests."""
from typing import List

from pydantic import BaseModel, ConfigDict, Field

MAX_RANGES = 64


class DigestRange(BaseModel):
    """One contiguous run of cluster members, folded."""
    model_config = ConfigDict(frozen=True)

    expire_lo: int = Field(..., ge=0)
    expire_hi: int = Field(..., ge=0)
    count: int = Field(..., ge=1)
    fold: bytes = Field(..., min_length=32, max_length=32, description="xor of member hashes")


class ClusterDigest(BaseModel):
    """Compact summary used to detect differences between two copies of a cluster."""
    model_config = ConfigDict(frozen=True)

    total_count: int = 0
    ranges: List[DigestRange] = Field(default_factory=list, max_length=MAX_RANGES)


EMPTY_DIGEST = ClusterDigest()
