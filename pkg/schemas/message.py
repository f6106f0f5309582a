"""Pydantic schemas for wire messages and their typed bodies."""
import enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field

from schemas.cluster import EMPTY_DIGEST, ClusterDigest
from schemas.mobject import DistributedPart
from schemas.replication import ReplicationPolicy, PolicyKind
from schemas.token import HomeLocation, Token

MAGIC = 0x4D4F
PROTOCOL_VERSION = 1
HEADER_SIZE = 16
MAX_BODY_SIZE = 16 * 1024 * 1024


class MessageType(enum.IntEnum):
    FETCH = 1
    FETCH_RESP = 2
    ASSENT = 3
    ASSENT_RESP = 4
    BUSY = 5
    REQUEST_PAYLOAD = 16
    ADOPT = 17
    REPLICATE = 18
    UPDATE = 19
    LOCAL_RESP = 20
    ERROR = 255

    @property
    def local(self) -> bool:
        return 16 <= self <= 20


class Message(BaseModel):
    """One framed wire unit."""
    model_config = ConfigDict(frozen=True)

    type: MessageType
    request_id: int = Field(0, ge=0, lt=2**64)
    body: bytes = b""


class _Body(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


# ── Remote channel ───────────────────────────────────────────────────────────
class FetchRequest(_Body):
    sender: HomeLocation
    token: Token


class FetchStatus(enum.IntEnum):
    FOUND = 0
    NOT_FOUND = 1


class FetchResponse(_Body):
    status: FetchStatus
    ditto: List[HomeLocation] = Field(default_factory=list)
    part: Optional[DistributedPart] = None


class BusyResponse(_Body):
    ditto: List[HomeLocation] = Field(default_factory=list)


class AssentRequest(_Body):
    sender: HomeLocation
    token: Token
    via_root: Optional[Token] = None
    has_cluster: bool = True
    digest: ClusterDigest = EMPTY_DIGEST
    sample: List[Token] = Field(default_factory=list)
    payload: Optional[bytes] = None
    ditto: List[HomeLocation] = Field(default_factory=list)


class AssentStatus(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1


class AssentResponse(_Body):
    status: AssentStatus
    accepted: bool = False
    digest: ClusterDigest = EMPTY_DIGEST
    missing: List[Token] = Field(default_factory=list)


# ── Local channel ────────────────────────────────────────────────────────────
class PayloadRequest(_Body):
    token: Token
    local_only: bool = False


class AdoptRequest(_Body):
    part: DistributedPart


class ReplicateAction(enum.IntEnum):
    START = 1
    STOP = 2


STOP_ALL = 255


class ReplicateRequest(_Body):
    token: Token
    action: ReplicateAction
    kind: int = Field(..., ge=0, le=255, description="PolicyKind, or 255 with STOP for all")
    level: int = Field(0, ge=0, le=0xFFFF)
    sustain_until: int = Field(0, ge=0, lt=2**64)

    @classmethod
    def start(cls, token: Token, policy: ReplicationPolicy) -> "ReplicateRequest":
        return cls(token=token, action=ReplicateAction.START, kind=policy.kind,
                   level=policy.level, sustain_until=policy.sustain_until or 0)

    @classmethod
    def stop(cls, token: Token, kind: Optional[PolicyKind] = None) -> "ReplicateRequest":
        return cls(token=token, action=ReplicateAction.STOP,
                   kind=STOP_ALL if kind is None else kind)


class UpdateRequest(_Body):
    token: Token
    tokens: List[Token] = Field(default_factory=list)


class LocalResponse(_Body):
    part: Optional[DistributedPart] = None


class ErrorResponse(_Body):
    code: str
    message: str = ""
