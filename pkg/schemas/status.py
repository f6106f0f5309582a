"""Pydantic schemas for GC reports and the status API."""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from schemas.token import Token


class GcReport(BaseModel):
    at: int
    store_removed: List[Token] = Field(default_factory=list)
    cache_removed: List[Token] = Field(default_factory=list)


class StatsView(BaseModel):
    address: str
    store_size: int
    cache_size: int
    cache_capacity: int
    counters: Dict[str, int] = Field(default_factory=dict)


class ObjectSummary(BaseModel):
    token_hex: str
    prefix: str
    home: str
    expire: int
    location: str = Field(..., description="store or cache")
    has_payload: bool
    cluster_size: int


class ObjectDetail(ObjectSummary):
    """Distributed part of one copy. Policies, peers and keys are never exposed."""
    payload_hex: Optional[str] = None
    cluster: List[str] = Field(default_factory=list, description="Member token hex strings in order")


class HealthView(BaseModel):
    status: str = "ok"
    service: str = "mo-server"
    address: str
