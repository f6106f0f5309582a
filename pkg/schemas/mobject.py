"""Pydantic schema for the distributed part of a micro object."""
from typing import Optional

from pydantic import BaseModel, ConfigDict

from schemas.token import Token
from services.cluster import Cluster


class DistributedPart(BaseModel):
    """Token, sealed payload (absent when not fetched) and cluster: all that ever travels."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    token: Token
    payload: Optional[bytes] = None
    cluster: Cluster = Cluster()
