"""Pydantic schemas for the openly shared section: replication policies and data."""
import enum
from typing import Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from schemas.cluster import ClusterDigest
from schemas.token import HomeLocation, Token


class PolicyKind(enum.IntEnum):
    FLOODING = 1
    SUSTAIN = 2


class ReplicationPolicy(BaseModel):
    """One active policy on a local copy."""
    model_config = ConfigDict(frozen=True)

    kind: PolicyKind
    level: int = Field(0, ge=0, le=0xFFFF, description="Subgraph depth; flooding only")
    sustain_until: Optional[int] = Field(None, gt=0, description="ms since epoch; sustain only")

    @model_validator(mode="after")
    def _fields_match_kind(self):
        if self.kind == PolicyKind.SUSTAIN:
            if self.sustain_until is None:
                raise ValueError("sustain needs a finite sustain_until")
            if self.level:
                raise ValueError("level applies to flooding only")
        elif self.sustain_until is not None:
            raise ValueError("sustain_until applies to sustain only")
        return self


def flooding(level: int = 0) -> ReplicationPolicy:
    return ReplicationPolicy(kind=PolicyKind.FLOODING, level=level)


def sustain(until: int) -> ReplicationPolicy:
    return ReplicationPolicy(kind=PolicyKind.SUSTAIN, sustain_until=until)


class PeerInfo(BaseModel):
    """What we know about another server holding a copy."""
    last_contact: int = 0
    willing: bool = True
    failures: int = 0
    last_digest: Optional[ClusterDigest] = None
    item_digests: Dict[Token, ClusterDigest] = Field(default_factory=dict)
    has_payload: set[Token] = Field(default_factory=set)


class ReplicationData(BaseModel):
    """Per-local-copy replication state. Never leaves the server."""
    policies: Dict[PolicyKind, ReplicationPolicy] = Field(default_factory=dict)
    peers: Dict[HomeLocation, PeerInfo] = Field(default_factory=dict)

    @property
    def flooding(self) -> Optional[ReplicationPolicy]:
        return self.policies.get(PolicyKind.FLOODING)

    @property
    def sustain_until(self) -> Optional[int]:
        policy = self.policies.get(PolicyKind.SUSTAIN)
        return policy.sustain_until if policy else None

    def learn(self, peer: HomeLocation, now: int = 0) -> PeerInfo:
        info = self.peers.get(peer)
        if info is None:
            info = self.peers[peer] = PeerInfo(last_contact=now)
        return info
